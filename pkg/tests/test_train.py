import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from pggru.gru import GruModel, NormalizationStats, gru_forward, init_params, pack, unpack
from pggru.train import (
    AdamState,
    HyperGrid,
    NonFiniteGradientError,
    TrainConfig,
    adam_step,
    clip_gradient_norm,
    fit_sequences,
    gradients,
    grid_points,
    ledger_csv,
    loss_preview,
    make_streams,
    nrms,
    random_search,
    rank_trials,
    trial_config,
    window_loss_and_grads,
)


def perturbed_small(eta, n_layers=1, n=4, seed=3):
    m = init_params(n_layers, n, eta, "xavier", seed)
    rng = np.random.default_rng(seed)
    p = {k: v + rng.normal(0, 0.2, v.shape) for k, v in pack(m).items()}
    return unpack(p, m)


def small_problem(eta=0, beta=2, n_layers=1, n=4, N=20, lam=1e-3):
    rng = np.random.default_rng(7)
    m = perturbed_small(eta, n_layers, n)
    m = m.with_norm(NormalizationStats(np.array([0.2]), np.array([1.5]), np.array([-0.1]), np.array([0.8])))
    y = rng.standard_normal(N)
    u = rng.standard_normal(N)
    cfg = TrainConfig(lam=lam, beta=beta, eta=eta, tbptt_length=max(N, beta + eta + 1),
                      n_layers=n_layers, n_gru=n)
    return m, y, u, cfg


# losses ------------------------------------------------------------------

@pytest.mark.parametrize("eta,n_layers", [(0, 1), (3, 1), (2, 3)])
def test_tape_loss_equals_reference_loss(eta, n_layers):
    m, y, u, cfg = small_problem(eta=eta, n_layers=n_layers)
    loss, _ = gradients(m, u, y, cfg)
    assert loss == pytest.approx(loss_preview(m, u, y, cfg), rel=1e-12)


def test_loss_trivial_cases():
    m, y, _, cfg = small_problem(lam=0.0)
    _, u_hat = gru_forward(m, y)
    # targets equal to the model output give zero loss
    assert loss_preview(m, u_hat, y, cfg) == pytest.approx(0.0, abs=1e-24)
    zero = unpack({k: np.zeros_like(v) for k, v in pack(m).items()}, m)
    zero = zero.with_norm(NormalizationStats.identity())
    assert loss_preview(zero, np.full(20, 0.7), y, cfg) == pytest.approx(0.49)
    lam_cfg = replace(cfg, lam=0.3)
    th = sum(float(np.vdot(v, v)) for v in pack(m).values())
    _, u_hat = gru_forward(m, y)
    assert loss_preview(m, u_hat, y, lam_cfg) == pytest.approx(0.3 * th, rel=1e-12)


def test_loss_ignores_first_beta_targets():
    m, y, u, cfg = small_problem(eta=1, beta=5)
    u2 = u.copy()
    u2[:5] = np.random.default_rng(0).normal(0, 100, 5)
    assert loss_preview(m, u2, y, cfg) == loss_preview(m, u, y, cfg)
    assert gradients(m, u2, y, cfg)[0] == gradients(m, u, y, cfg)[0]
    u2[5] += 1.0
    assert loss_preview(m, u2, y, cfg) != loss_preview(m, u, y, cfg)


def test_loss_rejects_short_sequence():
    m, y, u, cfg = small_problem(eta=0, beta=2)
    with pytest.raises(ValueError):
        loss_preview(m, u[:2], y[:2], cfg)


# gradients ----------------------------------------------------------------

@pytest.mark.parametrize("eta,n_layers,n", [(0, 1, 4), (3, 1, 4), (2, 3, 5)])
def test_gradients_match_finite_differences(eta, n_layers, n):
    m, y, u, cfg = small_problem(eta=eta, n_layers=n_layers, n=n)
    _, grads = gradients(m, u, y, cfg)
    p0 = pack(m)
    h = 1e-5
    for k, v in p0.items():
        if v.size == 0:
            continue
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus = {kk: vv.copy() for kk, vv in p0.items()}
            minus = {kk: vv.copy() for kk, vv in p0.items()}
            plus[k][idx] += h
            minus[k][idx] -= h
            num[idx] = (loss_preview(unpack(plus, m), u, y, cfg)
                        - loss_preview(unpack(minus, m), u, y, cfg)) / (2 * h)
        scale = max(np.max(np.abs(num)), 1e-8)
        assert np.max(np.abs(grads[k] - num)) / scale < 1e-5, k


def test_zero_model_output_bias_gradient():
    m, y, u, cfg = small_problem(eta=0, beta=2, lam=0.0)
    zero = unpack({k: np.zeros_like(v) for k, v in pack(m).items()}, m)
    zero = zero.with_norm(NormalizationStats.identity())
    _, g = gradients(zero, u, y, cfg)
    assert g["bu"][0, 0] == pytest.approx(2 * np.mean(0.0 - u[2:]), rel=1e-12)


def test_l2_gradient_is_two_lambda_theta():
    m, y, u, cfg = small_problem()
    _, g0 = gradients(m, u, y, replace(cfg, lam=0.0))
    _, g1 = gradients(m, u, y, replace(cfg, lam=0.25))
    p = pack(m)
    for k in p:
        assert np.allclose(g1[k] - g0[k], 0.5 * p[k], atol=1e-14)


def test_non_finite_gradient_names_block():
    m, y, u, cfg = small_problem()
    p = pack(m)
    p["Uu"][0, 0] = np.inf
    batch = make_streams(y, u, 1, 1, 0, cfg.beta)
    with pytest.raises(NonFiniteGradientError, match="'"):
        with np.errstate(all="ignore"):
            window_loss_and_grads(p, batch, cfg.lam)


def test_window_state_carry_reproduces_single_window_forward():
    # splitting into windows must not change the forward loss values
    m, y, u, cfg = small_problem(eta=2, n_layers=2, N=60)
    batch = make_streams(m.norm.normalize_input(y), m.norm.normalize_target(u), 1, 2, 2, cfg.beta)
    p = pack(m)
    full, _, _, data_full = window_loss_and_grads(p, batch, 0.0)
    H = None
    tot = cnt = 0.0
    for j0 in range(0, batch.n_steps, 17):
        j1 = min(j0 + 17, batch.n_steps)
        _, _, H, d = window_loss_and_grads(p, batch, 0.0, j0, j1, H)
        w = batch.mask[j0:j1].sum()
        if d is not None:
            tot += d * w
            cnt += w
    assert tot / cnt == pytest.approx(data_full, rel=1e-12)


# optimizer -------------------------------------------------------------------

def test_clip_gradient_norm():
    g = {"a": np.array([3.0]), "b": np.array([[4.0]])}
    c = clip_gradient_norm(g, 1.0)
    norm = np.sqrt(sum(float(np.vdot(v, v)) for v in c.values()))
    assert norm <= 1.0 + 1e-12
    assert np.allclose(c["a"] / g["a"], c["b"] / g["b"])
    assert clip_gradient_norm({"a": np.array([10.0])}, 0.1)["a"][0] == pytest.approx(0.1)
    z = {"a": np.zeros(3)}
    assert np.array_equal(clip_gradient_norm(z, 0.5)["a"], z["a"])
    same = clip_gradient_norm(g, 10.0)
    assert all(np.array_equal(same[k], g[k]) for k in g)
    with pytest.raises(ValueError):
        clip_gradient_norm(g, 0.0)


def test_adam_first_step_and_zero_gradient():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    st = AdamState.zeros_like(p)
    q = adam_step(p, {"w": np.array([0.3, -5.0, 1e3])}, st, 1e-2)
    assert np.allclose(np.abs(q["w"] - p["w"]), 1e-2, rtol=1e-6)
    assert st.step == 1
    st0 = AdamState.zeros_like(p)
    r = p
    for _ in range(5):
        r = adam_step(r, {"w": np.zeros(3)}, st0, 1e-2)
    assert np.array_equal(r["w"], p["w"])


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(1)
    p = {"w": rng.standard_normal(4)}
    st = AdamState.zeros_like(p)
    m = v = np.zeros(4)
    w = p["w"].copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p = adam_step(p, {"w": g}, st, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], w, rtol=1e-14)


# training ------------------------------------------------------------------

def teacher_data(N=3000, seed=0):
    teacher = perturbed_small(eta=2, n=4, seed=1)
    rng = np.random.default_rng(seed)
    # smooth random input
    x = np.convolve(rng.standard_normal(N + 20), np.ones(20) / np.sqrt(20), "valid")[:N]
    _, u = gru_forward(teacher, x)
    return teacher, x, u


def test_training_is_deterministic():
    _, x, u = teacher_data(600)
    cfg = TrainConfig(beta=4, eta=2, tbptt_length=60, batch_size=2, epochs=2, n_layers=1,
                      n_gru=4, learning_rate=1e-3, seed=5)
    from pggru.train import new_model
    a = fit_sequences(new_model(cfg, x, u), x, u, cfg)
    b = fit_sequences(new_model(cfg, x, u), x, u, cfg)
    assert a.loss_history == b.loss_history
    pa, pb = pack(a.model), pack(b.model)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_loss_decreases_over_first_steps():
    _, x, u = teacher_data(3000)
    cfg = TrainConfig(beta=4, eta=2, tbptt_length=100, batch_size=6, epochs=1, n_layers=1,
                      n_gru=4, learning_rate=1e-4, seed=0)
    from pggru.train import new_model
    m = new_model(cfg, x, u)
    xn, un = m.norm.normalize_input(x), m.norm.normalize_target(u)
    batch = make_streams(xn, un, 6, 1, 2, cfg.beta)
    batch = replace(batch, x_step=batch.x_step[:100], x_read=batch.x_read[:100],
                    target=batch.target[:100], mask=batch.mask[:100])
    p = pack(m)
    st = AdamState.zeros_like(p)
    losses = []
    for _ in range(11):
        loss, g, _, _ = window_loss_and_grads(p, batch, cfg.lam)
        losses.append(loss)
        p = adam_step(p, clip_gradient_norm(g, cfg.clip_norm), st, cfg.learning_rate)
    assert losses[10] < losses[0]


def test_fit_rejects_mismatched_eta():
    _, x, u = teacher_data(300)
    cfg = TrainConfig(beta=4, eta=2, tbptt_length=60, n_layers=1, n_gru=4)
    with pytest.raises(ValueError):
        fit_sequences(init_params(1, 4, 3), x, u, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=100, eta=100, tbptt_length=150)
    with pytest.raises(ValueError):
        TrainConfig(init_scheme="he")
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(ValueError):
        TrainConfig(lr_floor=0)


def test_cosine_learning_rate_schedule():
    cfg = TrainConfig(epochs=5, learning_rate=1e-3, lr_schedule="cosine", lr_floor=0.1)
    lrs = [cfg.epoch_learning_rate(e) for e in range(5)]
    assert lrs[0] == pytest.approx(1e-3) and lrs[-1] == pytest.approx(1e-4)
    assert lrs[2] == pytest.approx(0.55e-3)
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    const = TrainConfig(epochs=5, learning_rate=1e-3)
    assert {const.epoch_learning_rate(e) for e in range(5)} == {1e-3}


# metrics and search ----------------------------------------------------------

def test_nrms():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(100_000)
    a = (a - a.mean()) / a.std()
    assert nrms(a, a) == 0.0
    assert nrms(np.full_like(a, a.mean()), a) == pytest.approx(100.0)
    noisy = a + 0.01 * rng.standard_normal(a.size)
    assert nrms(noisy, a) == pytest.approx(1.0, rel=0.02)
    with pytest.raises(ValueError):
        nrms(np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        nrms(np.ones(3), np.arange(4.0))


def test_random_search_samples_grid_and_ranks():
    grid = HyperGrid()
    seen = []

    def run(point, seed):
        seen.append((point, seed))
        return 1.0, float(point["n_gru"]) + point["n_layers"] / 10

    res = random_search(grid, 6, 42, run)
    assert len(res) == 6
    assert all(grid.contains(r.params) for r in res)
    vals = [r.val_nrms for r in res]
    assert vals == sorted(vals)
    assert res[0].val_nrms <= np.median(vals)
    again = random_search(grid, 6, 42, lambda p, s: (1.0, float(p["n_gru"]) + p["n_layers"] / 10))
    assert [r.params for r in again] == [r.params for r in res]
    assert len({s for _, s in seen}) == 6


def test_random_search_single_point_grid_and_failures():
    one = HyperGrid(**{a: (getattr(HyperGrid(), a)[0],) for a in HyperGrid.AXES})
    assert len(list(grid_points(one))) == 1

    def run(point, seed):
        if seed % 2:
            raise FloatingPointError("diverged")
        return 0.5, 3.0

    res = random_search(one, 4, 1, run)
    assert all(r.params == next(grid_points(one)) for r in res)
    failed = [r for r in res if not r.ok]
    assert all(r.error.startswith("FloatingPointError") for r in failed)
    # failures rank last
    assert [r.ok for r in res] == sorted([r.ok for r in res], reverse=True)
    with pytest.raises(ValueError):
        random_search(one, 0, 1, run)


def test_ledger_and_trial_config():
    grid = HyperGrid()
    res = random_search(grid, 3, 0, lambda p, s: (0.1, 10.0 * p["batch_size"]))
    rows = list(csv.DictReader(io.StringIO(ledger_csv(res))))
    assert len(rows) == 3 and [r["rank"] for r in rows] == ["1", "2", "3"]
    assert "wall_time" not in rows[0]
    assert "wall_time" in ledger_csv(res, include_wall_time=True).splitlines()[0]
    cfg = trial_config(res[0].params, TrainConfig(), res[0].seed)
    assert cfg.beta == cfg.eta == res[0].params["beta_eta"]
    assert cfg.seed == res[0].seed
    assert rank_trials(list(reversed(res))) == res
