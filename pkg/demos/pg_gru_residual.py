"""Small physics-guided GRU trained on the residual of the linear inverse.

A 2x16 preview GRU learns what the linear inverse misses (friction, drag)
from one closed-loop training run, then adds its output to the linear
feedforward.  Takes about a minute on one core.
"""

import sys

from pggru.gru import gru_feedforward_full
from pggru.inversion import design_stable_inverse, linear_ff_input
from pggru.plant import (
    LoopConfig,
    ParasiticConfig,
    TwoMsdParams,
    discrete_model,
    generate_training_data,
    generate_validation_refs,
    iae,
    simulate_closed_loop,
)
from pggru.sgfilter import apply_centered, default_filter
from pggru.train import TrainConfig, tbptt_train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 6
params, parasitic, loop, filt = TwoMsdParams(), ParasiticConfig(), LoopConfig(), default_filter()
sff = design_stable_inverse(discrete_model(params, loop.Ts))

data = generate_training_data(params, parasitic, loop, seed=7, filt=filt)
cfg = TrainConfig(n_layers=2, n_gru=16, eta=48, beta=48, epochs=epochs, learning_rate=1.6e-3,
                  init_scheme="kaiming", lr_schedule="cosine", dtype="float32", seed=7)
res = tbptt_train(None, data, cfg, mode="residual", sff=sff,
                  callback=lambda ep, loss: print(f"epoch {ep:2d}  loss {loss:.4f}"))

print(f"{'ref':<4} {'ZPETC':>8} {'PG-GRU':>8}")
for name, r in zip(("R1", "R2", "R3"), generate_validation_refs(loop)):
    Fr = apply_centered(filt, r)
    u_phy = linear_ff_input(sff, Fr)
    u_pg = u_phy + gru_feedforward_full(res.model, Fr)
    e_lin = simulate_closed_loop(params, parasitic, loop, r, u_phy).e
    e_pg = simulate_closed_loop(params, parasitic, loop, r, u_pg).e
    print(f"{name:<4} {iae(e_lin, loop.Ts):8.3f} {iae(e_pg, loop.Ts):8.3f}")
