"""Training of the preview GRU: tape-based TBPTT, ADAM, clipping, random search.

The data are split into ``batch_size`` contiguous streams that are processed
in parallel.  Each stream starts from a zero hidden state; the first ``beta``
outputs of every stream are excluded from the loss.  Streams are cut into
windows of ``tbptt_length`` recursion steps; the hidden state is carried
from one window to the next but the gradient is not.

Within a window, layers advance as a wavefront: at step j layer l processes
time j - l, so all layers update with one batched operation per step.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .gru import GruModel, fit_normalization, init_params, pack, unpack

log = logging.getLogger(__name__)

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-5
    beta: int = 48
    eta: int = 48
    learning_rate: float = 1.6e-3
    tbptt_length: int = 299
    batch_size: int = 6
    clip_norm: float = 0.8
    epochs: int = 300
    init_scheme: str = "xavier"
    seed: int = 0
    n_layers: int = 7
    n_gru: int = 32
    dtype: str = "float64"
    # "cosine" anneals the step size from learning_rate to lr_floor * learning_rate
    lr_schedule: str = "constant"
    lr_floor: float = 0.05

    def __post_init__(self):
        if self.beta < 0 or self.eta < 0:
            raise ValueError("beta and eta must be non-negative")
        if self.tbptt_length <= self.beta + self.eta:
            raise ValueError("tbptt_length must exceed beta + eta")
        for name in ("learning_rate", "batch_size", "clip_norm", "n_layers", "n_gru"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.epochs < 0:
            raise ValueError("lam and epochs must be non-negative")
        if self.init_scheme not in ("xavier", "kaiming"):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if not 0 < self.lr_floor <= 1:
            raise ValueError("lr_floor must lie in (0, 1]")

    def epoch_learning_rate(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        frac = epoch / (self.epochs - 1)
        scale = self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.learning_rate * scale

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    b1: float = ADAM_B1
    b2: float = ADAM_B2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def clip_gradient_norm(grads, max_norm):
    """Scale all gradients by max_norm / g when the global 2-norm g exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    g = np.sqrt(sum(float(np.vdot(v, v)) for v in grads.values()))
    if g <= max_norm:
        return dict(grads)
    s = max_norm / g
    return {k: v * s for k, v in grads.items()}


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected ADAM update; returns new parameters, state updated in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.b1 ** t
    c2 = 1.0 - state.b2 ** t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m[k] = state.b1 * state.m[k] + (1.0 - state.b1) * g
        v = state.v[k] = state.b2 * state.v[k] + (1.0 - state.b2) * (g * g)
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def nrms(predicted, actual):
    """100 * ||predicted - actual|| / ||actual - mean(actual)|| in percent."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise ValueError("predicted and actual must have equal lengths")
    den = np.linalg.norm(actual - actual.mean())
    if den == 0:
        raise ValueError("actual signal has zero variance")
    return 100.0 * float(np.linalg.norm(predicted - actual) / den)


# loss definitions ----------------------------------------------------------

def l2_norm_sq(params):
    return float(sum(np.vdot(v, v) for v in params.values()))


def loss_preview(m: GruModel, u_target, y_input, cfg: TrainConfig):
    """Mean squared normalized error over k = beta .. N-eta-1 plus lam * ||theta||^2.

    Single sequence, zero initial state; reference implementation of the
    quantity minimized by :func:`tbptt_train`.
    """
    from .gru import gru_forward_normalized

    y = m.norm.normalize_input(y_input)
    u = m.norm.normalize_target(u_target)
    N = y.shape[0]
    if N <= cfg.beta + m.eta:
        raise ValueError("sequence too short for the beta/eta exclusions")
    _, u_hat = gru_forward_normalized(m, y)
    hi = min(N - m.eta, u.shape[0])
    if hi <= cfg.beta:
        raise ValueError("empty loss range")
    err = u_hat[cfg.beta:hi] - u[cfg.beta:hi]
    return float(np.mean(err * err) + cfg.lam * l2_norm_sq(pack(m)))


@dataclass
class StreamBatch:
    """Parallel streams laid out by recursion step.

    ``x_step[j, s]`` is the input consumed by layer 0 at step j,
    ``x_read[j, s]`` the input used by the readout at step j, ``target`` and
    ``mask`` are aligned with the readout.
    """

    x_step: np.ndarray
    x_read: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    n_layers: int

    @property
    def n_steps(self):
        return self.x_step.shape[0]


def make_streams(x, target, n_streams, n_layers, eta, beta, dtype=np.float64):
    """Split normalized sequences into equally long streams.

    Output k of a stream is read at step ``k + n_layers - 1 + eta`` (the top
    layer lags layer 0 by n_layers - 1 steps in the wavefront).
    """
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    target = target[:, None] if target.ndim == 1 else target
    Nt = min(target.shape[0], x.shape[0] - eta)
    M = Nt // n_streams
    if M <= beta:
        raise ValueError("data too short for the requested number of streams")
    lag = n_layers - 1 + eta
    T = M + lag
    Nx = x.shape[0]
    starts = np.arange(n_streams) * M
    j = np.arange(T)
    idx_step = np.minimum(starts[None, :] + j[:, None], Nx - 1)
    read = j[:, None] - (n_layers - 1)
    idx_read = np.clip(starts[None, :] + read, 0, Nx - 1)
    k_local = j - lag
    valid = (k_local >= beta) & (k_local < M)
    idx_tgt = np.clip(starts[None, :] + k_local[:, None], 0, target.shape[0] - 1)
    mask = np.broadcast_to(valid[:, None, None], (T, n_streams, 1)).astype(dtype)
    return StreamBatch(
        x_step=x[idx_step].astype(dtype),
        x_read=x[idx_read].astype(dtype),
        target=(target[idx_tgt] * mask).astype(dtype),
        mask=mask,
        n_layers=n_layers,
    )


def _window_forward(tape, P, H0, batch: StreamBatch, j0, j1, lam):
    """Tape the recursion over steps j0..j1-1; returns (loss node, data loss, final state)."""
    Ly = batch.n_layers
    n = H0.shape[-1]
    dt = H0.dtype
    H = tape.const(H0)
    s_zs, s_z, s_s, s_x = (Ellipsis, slice(0, 2 * n)), (Ellipsis, slice(0, n)), \
        (Ellipsis, slice(n, 2 * n)), (Ellipsis, slice(2 * n, 3 * n))
    tops = []
    for j in range(j0, j1):
        tops.append(tape.index(H, Ly - 1) if H.requires_grad else tape.const(H.value[Ly - 1]))
        Xin = tape.matmul(tape.const(batch.x_step[j][None]), P["W1"])
        if Ly > 1:
            Hin = tape.index(H, slice(0, Ly - 1)) if H.requires_grad else tape.const(H.value[:Ly - 1])
            Xin = tape.concat([Xin, tape.matmul(Hin, P["Win"])], axis=0)
        Xin = tape.add(Xin, P["b"])
        zs = tape.sigmoid(tape.add(tape.index(Xin, s_zs), tape.matmul(H, P["Uzs"])))
        z = tape.index(zs, s_z)
        s = tape.index(zs, s_s)
        c = tape.tanh(tape.add(tape.index(Xin, s_x), tape.matmul(tape.mul(s, H), P["Ux"])))
        H = tape.add(c, tape.mul(z, tape.sub(H, c)))
        if j < Ly - 1:
            # layers above j have not started yet at the beginning of a stream
            m = (np.arange(Ly) <= j).astype(dt)[:, None, None]
            H = tape.mul(H, tape.const(m))
    sl = slice(j0, j1)
    top = tape.stack(tops, axis=0)
    out = tape.add(tape.add(tape.matmul(top, P["Uu"]),
                            tape.matmul(tape.const(batch.x_read[sl]), P["Wu"])), P["bu"])
    mask = batch.mask[sl]
    if mask.sum() == 0:
        data = None
    else:
        data = tape.masked_mse(out, batch.target[sl], mask)
    reg = tape.sum_squares([P[k] for k in sorted(P)], scale=lam)
    loss = reg if data is None else tape.add(data, reg)
    return loss, (None if data is None else float(data.value)), H.value


def _grads_checked(P):
    grads = {}
    for k in sorted(P):
        g = P[k].grad
        g = np.zeros_like(P[k].value) if g is None else g
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {k!r}")
        grads[k] = g
    return grads


def window_loss_and_grads(params, batch: StreamBatch, lam, j0=0, j1=None, H0=None):
    """Loss and exact gradients for one TBPTT window of a stream batch."""
    tape = Tape()
    P = {k: tape.leaf(v) for k, v in params.items()}
    n = params["Uzs"].shape[1]
    S = batch.x_step.shape[1]
    j1 = batch.n_steps if j1 is None else j1
    if H0 is None:
        H0 = np.zeros((batch.n_layers, S, n), dtype=params["Uzs"].dtype)
    loss, data, H = _window_forward(tape, P, H0, batch, j0, j1, lam)
    tape.backward(loss)
    return float(loss.value), _grads_checked(P), H, data


def gradients(m: GruModel, u_target, y_input, cfg: TrainConfig):
    """Loss of :func:`loss_preview` and its gradient w.r.t. the packed parameters."""
    y = m.norm.normalize_input(y_input)
    u = m.norm.normalize_target(u_target)
    batch = make_streams(y, u, 1, m.n_layers, m.eta, cfg.beta)
    loss, grads, _, _ = window_loss_and_grads(pack(m), batch, cfg.lam)
    return loss, grads


@dataclass
class TrainResult:
    model: GruModel
    loss_history: list
    initial_loss: float
    wall_time: float = field(default=0.0, compare=False)


def fit_sequences(model: GruModel, x, target, cfg: TrainConfig, callback=None) -> TrainResult:
    """TBPTT training of ``model`` on raw sequences ``x`` (input) and ``target``."""
    if model.eta != cfg.eta:
        raise ValueError("model preview differs from the training config")
    dt = np.dtype(cfg.dtype)
    xn = model.norm.normalize_input(x)
    tn = model.norm.normalize_target(target)
    batch = make_streams(xn, tn, cfg.batch_size, model.n_layers, model.eta, cfg.beta, dt)
    params = pack(model, dt)
    state = AdamState.zeros_like(params)
    n = model.n_gru
    L = cfg.tbptt_length
    history = []
    t0 = time.perf_counter()
    initial = None
    for epoch in range(cfg.epochs):
        lr = cfg.epoch_learning_rate(epoch)
        H = np.zeros((model.n_layers, cfg.batch_size, n), dtype=dt)
        tot, cnt = 0.0, 0
        for j0 in range(0, batch.n_steps, L):
            j1 = min(j0 + L, batch.n_steps)
            loss, grads, H, data = window_loss_and_grads(params, batch, cfg.lam, j0, j1, H)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}")
            if data is not None:
                w = float(batch.mask[j0:j1].sum())
                tot += data * w
                cnt += w
            if initial is None:
                initial = data if data is not None else loss
            grads = clip_gradient_norm(grads, cfg.clip_norm)
            params = adam_step(params, grads, state, lr)
        epoch_loss = tot / cnt + cfg.lam * l2_norm_sq(params)
        history.append(epoch_loss)
        log.info("epoch %d loss %.6g", epoch, epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss)
    return TrainResult(unpack(params, model), history,
                       float(initial) if initial is not None else float("nan"),
                       time.perf_counter() - t0)


def new_model(cfg: TrainConfig, x, target) -> GruModel:
    """Seeded initialization with normalization fitted to the training data."""
    m = init_params(cfg.n_layers, cfg.n_gru, cfg.eta, cfg.init_scheme, cfg.seed)
    return m.with_norm(fit_normalization(x, target))


def training_pairs(dataset, mode, sff=None):
    """Input and target sequences for one training mode.

    ``inverse``: input filtered y, target u.  ``residual``: input filtered y,
    target u minus the linear inverse prediction (needs ``sff``).
    """
    from .inversion import inverse_prediction, residuals

    y = np.asarray(dataset.y_filtered, dtype=float)
    u = np.asarray(dataset.u, dtype=float)
    if mode == "inverse":
        return y, u
    if mode == "residual":
        if sff is None:
            raise ValueError("residual mode needs a linear feedforward controller")
        u_phy = inverse_prediction(sff, y)
        return y, residuals(u, u_phy, sff.preview)
    raise ValueError(f"unknown training mode {mode!r}")


def tbptt_train(model, dataset, cfg: TrainConfig, mode="inverse", sff=None, callback=None):
    """Train on a DataSet in inverse or residual mode; ``model=None`` initializes one."""
    x, target = training_pairs(dataset, mode, sff)
    if model is None:
        model = new_model(cfg, x, target)
    return fit_sequences(model, x, target, cfg, callback)


# random search -------------------------------------------------------------

@dataclass(frozen=True)
class HyperGrid:
    n_layers: tuple = (1, 2, 3, 4, 5, 6, 7)
    n_gru: tuple = (8, 16, 32, 64, 128)
    beta_eta: tuple = (2, 8, 32, 48, 64, 92, 128)
    lam: tuple = (1e-5, 2e-5, 4e-5, 8e-5)
    tbptt_length: tuple = (299, 899, 1399, 2099)
    learning_rate: tuple = (1e-4, 2e-4, 4e-4, 8e-4, 16e-4)
    clip_norm: tuple = (0.1, 0.2, 0.4, 0.8)
    batch_size: tuple = (2, 4, 6)
    init_scheme: tuple = ("kaiming", "xavier")

    AXES = ("n_layers", "n_gru", "beta_eta", "lam", "tbptt_length",
            "learning_rate", "clip_norm", "batch_size", "init_scheme")

    def sample(self, rng):
        return {a: getattr(self, a)[int(rng.integers(len(getattr(self, a))))] for a in self.AXES}

    def contains(self, point):
        return all(point[a] in getattr(self, a) for a in self.AXES)


@dataclass
class TrialResult:
    index: int
    params: dict
    seed: int
    final_loss: float
    val_nrms: float
    wall_time: float = 0.0
    error: str | None = None

    @property
    def ok(self):
        return self.error is None and np.isfinite(self.val_nrms)


def trial_config(point, base: TrainConfig, seed) -> TrainConfig:
    return replace(base, n_layers=point["n_layers"], n_gru=point["n_gru"],
                   beta=point["beta_eta"], eta=point["beta_eta"], lam=point["lam"],
                   tbptt_length=point["tbptt_length"], learning_rate=point["learning_rate"],
                   clip_norm=point["clip_norm"], batch_size=point["batch_size"],
                   init_scheme=point["init_scheme"], seed=seed)


def random_search(grid: HyperGrid, budget: int, base_seed: int, run_trial):
    """Sample ``budget`` grid points and rank the trials by validation NRMS.

    ``run_trial(point, seed)`` returns ``(final_loss, val_nrms)``; exceptions
    are recorded on the trial instead of aborting the search.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    ss = np.random.SeedSequence(base_seed)
    rng = np.random.default_rng(ss)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(budget)]
    results = []
    for i, seed in zip(range(budget), seeds):
        point = grid.sample(rng)
        t0 = time.perf_counter()
        try:
            final_loss, val = run_trial(point, seed)
            err = None
        except (ArithmeticError, ValueError) as exc:
            final_loss, val, err = float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"
        results.append(TrialResult(i, point, seed, float(final_loss), float(val),
                                   time.perf_counter() - t0, err))
        log.info("trial %d nrms %.4g %s", i, val, point)
    return rank_trials(results)


def rank_trials(results):
    return sorted(results, key=lambda r: (not r.ok, r.val_nrms if r.ok else 0.0, r.index))


LEDGER_FIELDS = ("rank", "trial",) + HyperGrid.AXES + ("seed", "final_loss", "val_nrms", "error")


def ledger_csv(results, include_wall_time=False) -> str:
    """CSV text, one row per trial in rank order."""
    buf = io.StringIO()
    fields = LEDGER_FIELDS + (("wall_time",) if include_wall_time else ())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for rank, r in enumerate(results, 1):
        row = [rank, r.index] + [r.params[a] for a in HyperGrid.AXES] + [
            r.seed, repr(r.final_loss), repr(r.val_nrms), r.error or ""]
        if include_wall_time:
            row.append(f"{r.wall_time:.3f}")
        w.writerow(row)
    return buf.getvalue()


def grid_points(grid: HyperGrid):
    """Every point of the grid (for exhaustive checks on small grids)."""
    axes = [getattr(grid, a) for a in HyperGrid.AXES]
    for combo in itertools.product(*axes):
        yield dict(zip(HyperGrid.AXES, combo))
