"""Simulated two-mass spring-damper rig.

Covers the continuous model, the lead-lag/notch feedback controller, jerk-limited
references, closed-loop simulation with encoder quantization and optional
parasitic friction, data-set generation and closed-loop parameter fitting.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from .lti import (
    ContinuousStateSpace,
    DiscreteStateSpace,
    RationalTransferFunction,
    StreamingFilter,
    tf_to_ss,
    tustin_discretize,
    zoh_discretize,
)
from .sgfilter import SavGolFilter, apply_centered, default_filter

SCHEMA_VERSION = 1
TS_DEFAULT = 5e-4
ENCODER_STEP = 1e-3 * math.pi


class SimulationDivergedError(RuntimeError):
    def __init__(self, index):
        super().__init__(f"closed-loop simulation diverged at sample {index}")
        self.index = index


@dataclass(frozen=True)
class TwoMsdParams:
    J1: float = 1e-4
    J2: float = 1e-4
    k1: float = 4.0
    b1: float = 2e-3
    kv1: float = 1e-3
    kv2: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")

    def as_array(self):
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))


@dataclass(frozen=True)
class ParasiticConfig:
    coulomb1: float = 5e-3
    coulomb2: float = 2e-3
    smooth_vel: float = 0.5
    quad_drag: float = 1e-6
    enabled: bool = True

    def __post_init__(self):
        if min(self.coulomb1, self.coulomb2, self.quad_drag) < 0 or not self.smooth_vel > 0:
            raise ValueError("parasitic parameters must be non-negative")

    def torques(self, v1, v2):
        if not self.enabled:
            return 0.0, 0.0
        d1 = -self.coulomb1 * math.tanh(v1 / self.smooth_vel) - self.quad_drag * v1 * abs(v1)
        d2 = -self.coulomb2 * math.tanh(v2 / self.smooth_vel) - self.quad_drag * v2 * abs(v2)
        return d1, d2


@dataclass(frozen=True)
class LoopConfig:
    Ts: float = TS_DEFAULT
    encoder_step: float = ENCODER_STEP
    ff_noise_var: float = 5e-7
    enable_quantization: bool = True
    fb: RationalTransferFunction = None

    def __post_init__(self):
        if not self.Ts > 0 or self.encoder_step < 0:
            raise ValueError("invalid loop configuration")
        if self.fb is None:
            object.__setattr__(self, "fb", make_feedback(self.Ts))

    def to_dict(self):
        return {"Ts": self.Ts, "encoder_step": self.encoder_step,
                "ff_noise_var": self.ff_noise_var,
                "enable_quantization": self.enable_quantization,
                "fb_num": self.fb.num.tolist(), "fb_den": self.fb.den.tolist()}


@dataclass(frozen=True)
class ReferenceSpec:
    distance: float
    vmax: float
    amax: float
    jmax: float = 1e5
    dwell: int = 1000

    def __post_init__(self):
        if min(self.vmax, self.amax, self.jmax) <= 0 or self.dwell < 0 or self.distance < 0:
            raise ValueError("reference limits must be positive")


COLUMNS = ("k", "t", "r", "uff", "ufb", "u", "y", "yf")


@dataclass
class DataSet:
    """Equal-length closed-loop records; ``u == u_fb + u_ff`` sample by sample."""

    t: np.ndarray
    r: np.ndarray
    u_ff: np.ndarray
    u_fb: np.ndarray
    u: np.ndarray
    y: np.ndarray
    y_filtered: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for name in ("r", "u_ff", "u_fb", "u", "y", "y_filtered"):
            if len(getattr(self, name)) != n:
                raise ValueError("data-set columns must have equal length")

    def __len__(self):
        return len(self.t)

    @property
    def k(self):
        return np.arange(len(self), dtype=np.int64)

    @property
    def e(self):
        return self.r - self.y

    def segment(self, start, stop):
        sl = slice(start, stop)
        return DataSet(self.t[sl], self.r[sl], self.u_ff[sl], self.u_fb[sl],
                       self.u[sl], self.y[sl], self.y_filtered[sl], dict(self.meta))

    def to_csv(self, path):
        path = Path(path)
        cols = [self.t, self.r, self.u_ff, self.u_fb, self.u, self.y, self.y_filtered]
        lines = [",".join(COLUMNS)]
        for i, row in enumerate(zip(*(c.tolist() for c in cols))):
            lines.append(str(i) + "," + ",".join(repr(v) for v in row))
        path.write_text("\n".join(lines) + "\n")
        meta = {"schema_version": SCHEMA_VERSION, **self.meta}
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if tuple(header) != COLUMNS:
                raise ValueError(f"unexpected header in {path}")
            data = np.loadtxt(fh, delimiter=",", dtype=float, ndmin=2)
        mp = meta_path(path)
        meta = json.loads(mp.read_text()) if mp.exists() else {}
        return cls(*(data[:, i].copy() for i in range(1, 8)), meta=meta)


def meta_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


# --------------------------------------------------------------------------
# model and controller

def build_2msd(p: TwoMsdParams) -> ContinuousStateSpace:
    """State [theta1, theta2, dtheta1, dtheta2], torque on mass 1, output theta2."""
    A = np.array([
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [-p.k1 / p.J1, p.k1 / p.J1, -(p.b1 + p.kv1) / p.J1, p.b1 / p.J1],
        [p.k1 / p.J2, -p.k1 / p.J2, p.b1 / p.J2, -(p.b1 + p.kv2) / p.J2],
    ])
    B = np.array([[0.0], [0.0], [1.0 / p.J1], [0.0]])
    C = np.array([[0.0, 1.0, 0.0, 0.0]])
    return ContinuousStateSpace(A, B, C)


def feedback_continuous() -> RationalTransferFunction:
    """Lead-lag times notch, 0.007 DC gain."""
    P = np.polynomial.polynomial
    wn = 90 * math.pi
    num = 0.007 * P.polymul([1.0, 1 / (4 * math.pi)], [1.0, 0.002 / wn, 1 / wn**2])
    den = P.polymul([1.0, 1 / (60 * math.pi)], [1.0, 1 / wn, 1 / wn**2])
    return RationalTransferFunction(num, den, None)


def make_feedback(Ts: float = TS_DEFAULT) -> RationalTransferFunction:
    return tustin_discretize(feedback_continuous(), Ts)


@lru_cache(maxsize=64)
def _discrete_plant(p: TwoMsdParams, Ts: float):
    dss = zoh_discretize(build_2msd(p), Ts)
    return dss.A, dss.B[:, 0]


def discrete_model(p: TwoMsdParams, Ts: float = TS_DEFAULT) -> DiscreteStateSpace:
    return zoh_discretize(build_2msd(p), Ts)


def quantize(theta, step):
    if step <= 0:
        return theta
    return np.round(np.asarray(theta) / step) * step


def plant_step(state, u, p: TwoMsdParams, nl: ParasiticConfig, Ts: float):
    """One sample of the ZOH plant plus Euler-coupled friction torques."""
    A, B = _discrete_plant(p, Ts)
    x = np.asarray(state, dtype=float)
    nxt = A @ x + B * u
    d1, d2 = nl.torques(x[2], x[3])
    nxt[2] += Ts * d1 / p.J1
    nxt[3] += Ts * d2 / p.J2
    return nxt


# --------------------------------------------------------------------------
# references

def point_to_point(distance, vmax, amax, jmax, Ts):
    """Jerk-limited rest-to-rest move sampled at k*Ts (last sample at rest)."""
    if min(vmax, amax, jmax) <= 0 or not Ts > 0:
        raise ValueError("infeasible reference specification")
    D = abs(float(distance))
    if D == 0.0:
        return np.zeros(1)
    sign = 1.0 if distance > 0 else -1.0
    if vmax * jmax >= amax**2:
        ap = amax
        Tj = amax / jmax
        Tca = vmax / amax - Tj
    else:
        ap = math.sqrt(vmax * jmax)
        Tj = ap / jmax
        Tca = 0.0
    v = vmax
    if v * (2 * Tj + Tca) > D:
        # cruise velocity never reached
        v = 0.5 * amax * (-amax / jmax + math.sqrt((amax / jmax) ** 2 + 4 * D / amax))
        if v >= amax**2 / jmax:
            ap, Tj, Tca = amax, amax / jmax, v / amax - amax / jmax
        else:
            v = (D * math.sqrt(jmax) / 2) ** (2.0 / 3.0)
            ap = math.sqrt(v * jmax)
            Tj, Tca = ap / jmax, 0.0
        Tv = 0.0
    else:
        Tv = (D - v * (2 * Tj + Tca)) / v
    j = ap / Tj
    durations = [Tj, Tca, Tj, Tv, Tj, Tca, Tj]
    jerks = [j, 0.0, -j, 0.0, -j, 0.0, j]
    T = sum(durations)
    K = int(math.ceil(T / Ts))
    t = np.arange(K + 1) * Ts
    pos = np.full(K + 1, D)
    t0, p0, v0, a0 = 0.0, 0.0, 0.0, 0.0
    for dur, jk in zip(durations, jerks):
        if dur <= 0:
            continue
        mask = (t >= t0) & (t < t0 + dur)
        tau = t[mask] - t0
        pos[mask] = p0 + v0 * tau + a0 * tau**2 / 2 + jk * tau**3 / 6
        p0, v0, a0 = (p0 + v0 * dur + a0 * dur**2 / 2 + jk * dur**3 / 6,
                      v0 + a0 * dur + jk * dur**2 / 2, a0 + jk * dur)
        t0 += dur
    return sign * pos


def third_order_trajectory(spec: ReferenceSpec, Ts: float = TS_DEFAULT) -> np.ndarray:
    """Back-and-forth move: forward profile, dwell, mirrored return to zero."""
    fwd = point_to_point(spec.distance, spec.vmax, spec.amax, spec.jmax, Ts)
    if spec.distance == 0:
        return np.zeros(2 * spec.dwell + 1)
    dwell = np.full(spec.dwell, fwd[-1])
    back = fwd[-1] - fwd[1:]
    return np.concatenate([fwd, dwell, back])


def _with_rest(r, dwell):
    z = np.zeros(dwell)
    return np.concatenate([z, r, z])


TRAINING_DISTANCES = tuple(k * math.pi for k in (6, 8, 10, 12))
TRAINING_VMAX = (30.0, 55.0, 120.0)
TRAINING_AMAX = 1000.0
VALIDATION_SPECS = (
    (6 * math.pi, 40.0, 700.0),
    (7 * math.pi, 60.0, 800.0),
    (10 * math.pi, 100.0, 900.0),
)


def training_reference(Ts=TS_DEFAULT, jmax=1e5, dwell_s=0.5):
    dwell = int(round(dwell_s / Ts))
    parts = [np.zeros(dwell)]
    for vmax in TRAINING_VMAX:
        for D in TRAINING_DISTANCES:
            spec = ReferenceSpec(D, vmax, TRAINING_AMAX, jmax, dwell)
            parts.append(third_order_trajectory(spec, Ts))
            parts.append(np.zeros(dwell))
    return np.concatenate(parts)


def generate_validation_refs(loop: LoopConfig, jmax=1e5, dwell_s=0.5):
    """Slow, nominal and fast back-and-forth references, each padded with rest."""
    dwell = int(round(dwell_s / loop.Ts))
    refs = []
    for D, v, a in VALIDATION_SPECS:
        spec = ReferenceSpec(D, v, a, jmax, dwell)
        refs.append(_with_rest(third_order_trajectory(spec, loop.Ts), dwell))
    return refs


# --------------------------------------------------------------------------
# closed loop

def simulate_closed_loop(p: TwoMsdParams, nl: ParasiticConfig, loop: LoopConfig, r,
                         u_ff=None, x0=None, filt: SavGolFilter | None = None) -> DataSet:
    """Sample-by-sample closed loop u = K_fb(r - y) + u_ff on the rig model."""
    r = np.asarray(r, dtype=float)
    N = len(r)
    if callable(u_ff):
        u_ff = u_ff(r)
    u_ff = np.zeros(N) if u_ff is None else np.asarray(u_ff, dtype=float)
    if len(u_ff) != N:
        raise ValueError("reference and feedforward must have equal length")
    Ts = loop.Ts
    A, B = _discrete_plant(p, Ts)
    a = A.tolist()
    b = B.tolist()
    fb = StreamingFilter(loop.fb)
    step = loop.encoder_step if loop.enable_quantization else 0.0
    x = [0.0] * 4 if x0 is None else [float(v) for v in x0]
    c1 = Ts / p.J1
    c2 = Ts / p.J2
    ys = np.empty(N)
    ufbs = np.empty(N)
    us = np.empty(N)
    rl = r.tolist()
    ffl = u_ff.tolist()
    for k in range(N):
        th2 = x[1]
        y = round(th2 / step) * step if step > 0 else th2
        ufb = fb.step(rl[k] - y)
        u = ufb + ffl[k]
        d1, d2 = nl.torques(x[2], x[3])
        x = [a[0][0] * x[0] + a[0][1] * x[1] + a[0][2] * x[2] + a[0][3] * x[3] + b[0] * u,
             a[1][0] * x[0] + a[1][1] * x[1] + a[1][2] * x[2] + a[1][3] * x[3] + b[1] * u,
             a[2][0] * x[0] + a[2][1] * x[1] + a[2][2] * x[2] + a[2][3] * x[3] + b[2] * u + c1 * d1,
             a[3][0] * x[0] + a[3][1] * x[1] + a[3][2] * x[2] + a[3][3] * x[3] + b[3] * u + c2 * d2]
        if not math.isfinite(x[0] + x[1] + x[2] + x[3]):
            raise SimulationDivergedError(k)
        ys[k] = y
        ufbs[k] = ufb
        us[k] = u
    yf = apply_centered(filt, ys) if filt is not None and N >= filt.window else ys.copy()
    return DataSet(np.arange(N) * Ts, r.copy(), u_ff.copy(), ufbs, us, ys, yf)


def closed_loop_lti(dss: DiscreteStateSpace, fb: RationalTransferFunction) -> DiscreteStateSpace:
    """Linear closed loop with inputs [r, u_ff] and output y (no quantization)."""
    k = tf_to_ss(fb)
    A, B, C = dss.A, dss.B, dss.C
    Ak, Bk, Ck, Dk = k.A, k.B, k.C, k.D
    n, nk = A.shape[0], Ak.shape[0]
    Acl = np.block([[A - B @ Dk @ C, B @ Ck], [-Bk @ C, Ak]])
    Bcl = np.block([[B @ Dk, B], [Bk, np.zeros((nk, 1))]])
    Ccl = np.hstack([C, np.zeros((1, nk))])
    return DiscreteStateSpace(Acl, Bcl, Ccl, dss.Ts)


def simulate_modal(dss: DiscreteStateSpace, u):
    """Zero-state response computed mode by mode with first-order recursions."""
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    lam, V = np.linalg.eig(dss.A)
    Bm = np.linalg.solve(V, dss.B.astype(complex))
    Cm = dss.C @ V
    drive = u @ Bm.T
    y = np.zeros(len(u), dtype=complex)
    for i, li in enumerate(lam):
        xi = lfilter([0.0, 1.0], [1.0, -li], drive[:, i])
        y += Cm[0, i] * xi
    return y.real + (u @ dss.D.T)[:, 0]


def model_output(p: TwoMsdParams, loop: LoopConfig, r, u_ff):
    """Closed-loop model prediction y_hat driven by the recorded r and u_ff."""
    cl = closed_loop_lti(discrete_model(p, loop.Ts), loop.fb)
    return simulate_modal(cl, np.column_stack([r, u_ff]))


@dataclass
class IdentificationResult:
    params: TwoMsdParams
    cost: float
    initial_cost: float
    n_evals: int
    free: tuple


IDENTIFIABLE = ("J2", "k1", "b1", "kv2")


def identification_cost(p: TwoMsdParams, data: DataSet, loop: LoopConfig):
    yhat = model_output(p, loop, data.r, data.u_ff)
    return float(np.mean((data.y - yhat) ** 2))


def identify_physical_params(data: DataSet, loop: LoopConfig, theta0: TwoMsdParams,
                             free=IDENTIFIABLE, restarts=3, maxiter=4000,
                             xatol=1e-9, fatol=0.0) -> IdentificationResult:
    """Output-error fit of the closed-loop model, Nelder-Mead over log-parameters.

    Parameters not in ``free`` keep their ``theta0`` value.
    """
    free = tuple(free)
    unknown = set(free) - set(TwoMsdParams.names())
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)}")
    base = asdict(theta0)
    n_evals = 0

    def unpack(z):
        vals = dict(base)
        vals.update({name: math.exp(zi) for name, zi in zip(free, z)})
        return TwoMsdParams(**vals)

    def cost(z):
        nonlocal n_evals
        n_evals += 1
        try:
            c = identification_cost(unpack(z), data, loop)
        except (ValueError, np.linalg.LinAlgError):
            return np.inf
        return c if np.isfinite(c) else np.inf

    z0 = np.array([math.log(base[name]) for name in free])
    c0 = cost(z0)
    if not np.isfinite(c0):
        raise ValueError("identification cost is not finite at the initial guess")
    best_z, best_c = z0, c0
    for _ in range(max(1, restarts)):
        res = minimize(cost, best_z, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": xatol, "fatol": fatol,
                                "adaptive": True})
        if res.fun <= best_c:
            improved = res.fun < best_c
            best_z, best_c = res.x, float(res.fun)
            if not improved:
                break
    return IdentificationResult(unpack(best_z), best_c, c0, n_evals, free)


# --------------------------------------------------------------------------
# data generation and metrics

def generate_training_data(p: TwoMsdParams, nl: ParasiticConfig, loop: LoopConfig,
                           seed: int, filt: SavGolFilter | None = None, reference=None) -> DataSet:
    """Reference run twice: first without feedforward, then with white-noise input."""
    filt = default_filter() if filt is None else filt
    r1 = training_reference(loop.Ts) if reference is None else np.asarray(reference, float)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, math.sqrt(loop.ff_noise_var), len(r1))
    r = np.concatenate([r1, r1])
    u_ff = np.concatenate([np.zeros(len(r1)), noise])
    ds = simulate_closed_loop(p, nl, loop, r, u_ff, filt=filt)
    ds.meta.update({"kind": "training", "seed": int(seed), "passes": [[0, len(r1)], [len(r1), len(r)]]})
    return ds


def generate_validation_data(p: TwoMsdParams, nl: ParasiticConfig, loop: LoopConfig,
                             filt: SavGolFilter | None = None, refs=None) -> DataSet:
    """Three validation references run back to back without feedforward."""
    filt = default_filter() if filt is None else filt
    refs = generate_validation_refs(loop) if refs is None else refs
    bounds, start = [], 0
    for ref in refs:
        bounds.append([start, start + len(ref)])
        start += len(ref)
    ds = simulate_closed_loop(p, nl, loop, np.concatenate(refs), None, filt=filt)
    ds.meta.update({"kind": "validation", "segments": bounds})
    return ds


def iae(e, Ts: float) -> float:
    return float(Ts * np.sum(np.abs(np.asarray(e, dtype=float))))


def params_to_dict(p: TwoMsdParams):
    return asdict(p)


def params_from_dict(d) -> TwoMsdParams:
    return TwoMsdParams(**{k: float(d[k]) for k in TwoMsdParams.names()})


def scaled(p: TwoMsdParams, factors: dict) -> TwoMsdParams:
    return replace(p, **{k: getattr(p, k) * v for k, v in factors.items()})
