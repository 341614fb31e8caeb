"""Preview GRU: model container, forward evaluation, initialization, artifacts.

Recursion per layer (0-based time, math orientation ``W @ input``)::

    z(k)   = sigma(W_z y(k) + U_z x(k) + b_z)
    s(k)   = sigma(W_s y(k) + U_s x(k) + b_s)
    x(k+1) = z(k) * x(k) + (1 - z(k)) * tanh(W_x y(k) + U_x (s(k) * x(k)) + b_x)

Layer l+1 consumes ``x^l(k+1)`` as its input at step k.  The top layer adds
the readout ``u(k) = W_u y(k+eta) + U_u x_top(k+eta) + b_u`` which is defined
for k = 0 .. N-eta-1.  Inputs and targets live in normalized space inside the
model; :func:`gru_forward` returns de-normalized outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
SCALE_FLOOR = 1e-12
LAYER_ORDER = ("W_z", "U_z", "b_z", "W_s", "U_s", "b_s", "W_x", "U_x", "b_x")
OUTPUT_ORDER = ("W_u", "U_u", "b_u")


@dataclass(frozen=True)
class NormalizationStats:
    input_mean: np.ndarray
    input_scale: np.ndarray
    target_mean: np.ndarray
    target_scale: np.ndarray

    def __post_init__(self):
        for name in ("input_scale", "target_scale"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive")

    @classmethod
    def identity(cls, n_in=1, n_out=1):
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))

    def normalize_input(self, y):
        return (_as_2d(y) - self.input_mean) / self.input_scale

    def normalize_target(self, u):
        return (_as_2d(u) - self.target_mean) / self.target_scale

    def denormalize_target(self, u):
        return _as_2d(u) * self.target_scale + self.target_mean

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("input_mean", "input_scale", "target_mean", "target_scale")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float)
                     for k in ("input_mean", "input_scale", "target_mean", "target_scale")))


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def fit_normalization(inputs, targets) -> NormalizationStats:
    """Per-channel mean and standard deviation, std floored at 1e-12."""
    inputs, targets = _as_2d(inputs), _as_2d(targets)
    if inputs.size == 0 or targets.size == 0:
        raise ValueError("cannot fit normalization on empty data")
    return NormalizationStats(
        inputs.mean(axis=0), np.maximum(inputs.std(axis=0), SCALE_FLOOR),
        targets.mean(axis=0), np.maximum(targets.std(axis=0), SCALE_FLOOR),
    )


@dataclass(frozen=True)
class GruLayerParameters:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_s: np.ndarray
    U_s: np.ndarray
    b_s: np.ndarray
    W_x: np.ndarray
    U_x: np.ndarray
    b_x: np.ndarray
    W_u: np.ndarray | None = None
    U_u: np.ndarray | None = None
    b_u: np.ndarray | None = None

    @property
    def n(self):
        return self.U_z.shape[0]

    @property
    def n_in(self):
        return self.W_z.shape[1]

    @property
    def has_output(self):
        return self.W_u is not None

    def validate(self):
        n, m = self.n, self.n_in
        want = {"W": (n, m), "U": (n, n), "b": (n,)}
        for name in LAYER_ORDER:
            if getattr(self, name).shape != want[name[0]]:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {want[name[0]]}")
        if self.has_output:
            n_out = self.W_u.shape[0]
            if self.W_u.ndim != 2 or self.U_u.shape != (n_out, n) or self.b_u.shape != (n_out,):
                raise ValueError("output block has inconsistent shapes")
        for name in LAYER_ORDER + (OUTPUT_ORDER if self.has_output else ()):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class GruModel:
    layers: tuple
    eta: int
    norm: NormalizationStats = field(default_factory=NormalizationStats.identity)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a GRU model needs at least one layer")
        if self.eta < 0:
            raise ValueError("preview eta must be non-negative")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")
        for i, layer in enumerate(self.layers):
            layer.validate()
            if layer.has_output != (i == len(self.layers) - 1):
                raise ValueError("the output block belongs to the top layer only")
            if i and layer.n_in != self.layers[i - 1].n:
                raise ValueError(f"layer {i} input size does not match layer {i - 1}")
        # the readout taps the model input directly
        if self.layers[-1].W_u.shape[1] != self.layers[0].n_in:
            raise ValueError("W_u must act on the model input")

    @property
    def n_gru(self):
        return self.layers[0].n

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    def with_norm(self, norm):
        return replace(self, norm=norm)

    def parameter_count(self):
        return sum(getattr(l, k).size for l in self.layers for k in LAYER_ORDER) + sum(
            getattr(self.layers[-1], k).size for k in OUTPUT_ORDER)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _layer_states(layer: GruLayerParameters, inp):
    """Hidden states x(0..N) for one layer driven by ``inp`` of shape (N, n_in)."""
    n = layer.n
    N = inp.shape[0]
    Wzs = np.concatenate([layer.W_z, layer.W_s]).T
    X_zs = inp @ Wzs + np.concatenate([layer.b_z, layer.b_s])
    X_x = inp @ layer.W_x.T + layer.b_x
    Uzs = np.concatenate([layer.U_z, layer.U_s]).T
    UxT = layer.U_x.T
    H = np.zeros((N + 1, n))
    h = H[0]
    for k in range(N):
        zs = _sigmoid(X_zs[k] + h @ Uzs)
        z, s = zs[:n], zs[n:]
        c = np.tanh(X_x[k] + (s * h) @ UxT)
        h = c + z * (h - c)
        H[k + 1] = h
    return H


def gru_forward_normalized(m: GruModel, y_norm):
    """Forward pass on an already normalized input of shape (N, n_in)."""
    y_norm = _as_2d(y_norm)
    N = y_norm.shape[0]
    if N < m.eta + 1:
        raise ValueError(f"sequence of length {N} is shorter than eta + 1 = {m.eta + 1}")
    states = []
    inp = y_norm
    for layer in m.layers:
        H = _layer_states(layer, inp)
        states.append(H)
        inp = H[1:]
    top = m.layers[-1]
    idx = slice(m.eta, N)
    u = y_norm[idx] @ top.W_u.T + states[-1][idx] @ top.U_u.T + top.b_u
    return states, u


def gru_forward(m: GruModel, y):
    """Evaluate the model on a raw input sequence.

    Returns
    -------
    states : list of ndarray
        Per layer hidden states x(0..N), normalized space.
    u_hat : ndarray
        De-normalized output for k = 0 .. N-eta-1 (1-D for a single output).
    """
    states, u = gru_forward_normalized(m, m.norm.normalize_input(y))
    u = m.norm.denormalize_target(u)
    return states, (u[:, 0] if u.shape[1] == 1 else u)


def gru_feedforward(m: GruModel, r_filtered):
    """Feedforward signal from a (filtered) reference; same map as gru_forward."""
    return gru_forward(m, r_filtered)[1]


def gru_feedforward_full(m: GruModel, r_filtered):
    """Feedforward over the whole horizon, holding the reference at its final value."""
    r = np.asarray(r_filtered, dtype=float)
    ahead = np.concatenate([r, np.full(m.eta, r[-1])])
    return gru_feedforward(m, ahead)


def init_params(n_layers: int, n_gru: int, eta: int, scheme="xavier", seed=0,
                n_in=1, n_out=1, norm=None) -> GruModel:
    """Fan-scaled normal weights from a seeded generator; zero biases."""
    if n_layers < 1 or n_gru < 1:
        raise ValueError("need at least one layer and one neuron")
    if scheme not in ("xavier", "kaiming"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)

    def draw(rows, cols):
        var = 2.0 / (cols + rows) if scheme == "xavier" else 2.0 / cols
        return rng.normal(0.0, np.sqrt(var), size=(rows, cols))

    layers = []
    m = n_in
    for i in range(n_layers):
        blocks = {}
        for g in ("z", "s", "x"):
            blocks[f"W_{g}"] = draw(n_gru, m)
            blocks[f"U_{g}"] = draw(n_gru, n_gru)
            blocks[f"b_{g}"] = np.zeros(n_gru)
        if i == n_layers - 1:
            blocks["W_u"] = draw(n_out, n_in)
            blocks["U_u"] = draw(n_out, n_gru)
            blocks["b_u"] = np.zeros(n_out)
        layers.append(GruLayerParameters(**blocks))
        m = n_gru
    return GruModel(tuple(layers), eta, norm or NormalizationStats.identity(n_in, n_out))


# packed (row-vector) layout used by the trainer ---------------------------

PACKED_KEYS = ("W1", "Win", "Uzs", "Ux", "b", "Wu", "Uu", "bu")


def pack(m: GruModel, dtype=np.float64):
    """Stacked tensors for batched evaluation.

    W1 (n_in, 3n), Win (L-1, n, 3n), Uzs (L, n, 2n), Ux (L, n, n),
    b (L, 1, 3n), Wu (n_in, n_out), Uu (n, n_out), bu (1, n_out).
    Gate column blocks are ordered [z | s | x].
    """
    L, n = m.n_layers, m.n_gru
    W = [np.concatenate([l.W_z, l.W_s, l.W_x]).T for l in m.layers]
    top = m.layers[-1]
    out = {
        "W1": W[0],
        "Win": np.stack(W[1:]) if L > 1 else np.zeros((0, n, 3 * n)),
        "Uzs": np.stack([np.concatenate([l.U_z, l.U_s]).T for l in m.layers]),
        "Ux": np.stack([l.U_x.T for l in m.layers]),
        "b": np.stack([np.concatenate([l.b_z, l.b_s, l.b_x])[None, :] for l in m.layers]),
        "Wu": top.W_u.T,
        "Uu": top.U_u.T,
        "bu": top.b_u[None, :],
    }
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in out.items()}


def unpack(p, template: GruModel) -> GruModel:
    """Inverse of :func:`pack`; eta, normalization and sizes come from ``template``."""
    n = template.n_gru
    layers = []
    for i in range(template.n_layers):
        W = (p["W1"] if i == 0 else p["Win"][i - 1]).astype(float)
        Uzs = p["Uzs"][i].astype(float)
        b = p["b"][i][0].astype(float)
        blocks = dict(
            W_z=W[:, :n].T.copy(), W_s=W[:, n:2 * n].T.copy(), W_x=W[:, 2 * n:].T.copy(),
            U_z=Uzs[:, :n].T.copy(), U_s=Uzs[:, n:].T.copy(), U_x=p["Ux"][i].astype(float).T.copy(),
            b_z=b[:n].copy(), b_s=b[n:2 * n].copy(), b_x=b[2 * n:].copy(),
        )
        if i == template.n_layers - 1:
            blocks.update(W_u=p["Wu"].astype(float).T.copy(), U_u=p["Uu"].astype(float).T.copy(),
                          b_u=p["bu"][0].astype(float).copy())
        layers.append(GruLayerParameters(**blocks))
    return replace(template, layers=tuple(layers))


# artifacts ----------------------------------------------------------------

def model_to_dict(m: GruModel, extra=None):
    params = []
    for i, layer in enumerate(m.layers):
        names = LAYER_ORDER + (OUTPUT_ORDER if layer.has_output else ())
        params.append({k: getattr(layer, k).tolist() for k in names})
    d = {
        "schema_version": SCHEMA_VERSION,
        "config": {"n_layers": m.n_layers, "n_gru": m.n_gru, "eta": m.eta,
                   "n_in": m.n_in, "activation": m.activation},
        "normalization": m.norm.to_dict(),
        "parameter_order": {"layer": list(LAYER_ORDER), "output": list(OUTPUT_ORDER)},
        "parameters": params,
    }
    if extra:
        d["meta"] = extra
    return d


def model_from_dict(d) -> GruModel:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema version {d.get('schema_version')!r}")
    cfg = d["config"]
    layers = []
    for blk in d["parameters"]:
        layers.append(GruLayerParameters(**{k: np.asarray(v, dtype=float) for k, v in blk.items()}))
    return GruModel(tuple(layers), int(cfg["eta"]), NormalizationStats.from_dict(d["normalization"]),
                    cfg.get("activation", "tanh"))


def save_model(m: GruModel, path, extra=None):
    Path(path).write_text(json.dumps(model_to_dict(m, extra), indent=1) + "\n")


def load_model(path) -> GruModel:
    return model_from_dict(json.loads(Path(path).read_text()))
