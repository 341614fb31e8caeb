"""Model-inverse feedforward design with stable approximation of unstable poles.

All sequences are stored unshifted.  A controller with total preview
``P = eta0 + n_ep`` computes ``u_ff(k) = K_ff(z) r(k + P)``; the shifted
reference is realized by indexing, and outputs shorter than the input carry
their length explicitly (``len(r) - P``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lti import (
    DiscreteStateSpace,
    Polynomial,
    RationalTransferFunction,
    apply_tf_filter,
    polynomial_roots,
    ss_to_tf,
)

UNIT_CIRCLE_BAND = 1e-6
_P = np.polynomial.polynomial


class InversionError(ValueError):
    pass


@dataclass(frozen=True)
class FeedforwardRealization:
    A_ff: np.ndarray
    B_ff: np.ndarray
    C_ff: np.ndarray
    D_ff: np.ndarray
    eta0: int
    Ts: float

    def as_state_space(self) -> DiscreteStateSpace:
        return DiscreteStateSpace(self.A_ff, self.B_ff, self.C_ff, self.Ts, self.D_ff)


@dataclass(frozen=True)
class StableInverseFF:
    kff: RationalTransferFunction
    eta0: int
    n_ep: int
    method: str
    unstable_poles: tuple = ()
    order: int | None = None
    tail_bound: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def preview(self):
        return self.eta0 + self.n_ep

    def to_dict(self):
        return {
            "num": self.kff.num.tolist(), "den": self.kff.den.tolist(), "Ts": self.kff.Ts,
            "eta0": self.eta0, "n_ep": self.n_ep, "method": self.method,
            "unstable_poles": [[float(p.real), float(p.imag)] for p in self.unstable_poles],
            "order": self.order, "tail_bound": self.tail_bound,
        }

    @classmethod
    def from_dict(cls, d):
        kff = RationalTransferFunction(d["num"], d["den"], d["Ts"])
        poles = tuple(complex(re, im) for re, im in d.get("unstable_poles", []))
        return cls(kff, int(d["eta0"]), int(d["n_ep"]), d["method"], poles,
                   d.get("order"), float(d.get("tail_bound", 0.0)))


def _markov(dss, k):
    return dss.C @ np.linalg.matrix_power(dss.A, k - 1) @ dss.B


def relative_degree(dss: DiscreteStateSpace, rtol=1e-10) -> int:
    """Smallest eta0 >= 1 with C A^(eta0-1) B clearly nonzero."""
    if not dss.is_siso:
        raise InversionError("relative degree is only defined here for SISO systems")
    nb = np.linalg.norm(dss.B)
    nc = np.linalg.norm(dss.C)
    for k in range(1, dss.n_states + 1):
        h = _markov(dss, k).item()
        scale = nc * np.linalg.norm(np.linalg.matrix_power(dss.A, k - 1)) * nb
        if abs(h) > rtol * scale:
            return k
    raise InversionError("no relative degree: all Markov parameters vanish")


def derive_feedforward(dss: DiscreteStateSpace) -> FeedforwardRealization:
    """Exact inverse realization driven by r(k + eta0)."""
    eta0 = relative_degree(dss)
    A, B, C = dss.A, dss.B, dss.C
    CAB = C @ np.linalg.matrix_power(A, eta0 - 1) @ B
    if abs(np.linalg.det(CAB)) == 0:
        raise InversionError("C A^(eta0-1) B is singular")
    inv = np.linalg.inv(CAB)
    CAe = C @ np.linalg.matrix_power(A, eta0)
    return FeedforwardRealization(
        A_ff=A - B @ inv @ CAe,
        B_ff=B @ inv,
        C_ff=-inv @ CAe,
        D_ff=inv,
        eta0=eta0,
        Ts=dss.Ts,
    )


def _poly_from_roots(roots):
    c = np.array([1.0 + 0j])
    for r in roots:
        c = _P.polymul(c, [-r, 1.0])
    return c.real


def _group_poles(poles, rtol=1e-8):
    """Pair complex-conjugate roots; real roots are returned as real numbers."""
    out, used = [], np.zeros(len(poles), bool)
    for i, p in enumerate(poles):
        if used[i]:
            continue
        used[i] = True
        if abs(p.imag) <= rtol * max(1.0, abs(p)):
            out.append(complex(p.real, 0.0))
            continue
        j = min((j for j in range(len(poles)) if not used[j]),
                key=lambda j: abs(poles[j] - np.conj(p)), default=None)
        if j is None:
            raise InversionError("unpaired complex pole in a real polynomial")
        used[j] = True
        q = p if p.imag > 0 else np.conj(p)
        out.append(complex(q.real, q.imag))
    return out


def factor_unstable(ff: FeedforwardRealization):
    """Split the inverse into a stable part and the unstable poles.

    Returns ``(stable_part, unstable_poles)`` with
    ``H(z) = stable_part(z) / prod (z - p_i)``.  Complex unstable poles are
    reported once per conjugate pair (positive imaginary part).
    """
    H = ss_to_tf(ff.as_state_space())
    den_roots = polynomial_roots(Polynomial(H.den)) if H.den_degree else np.array([])
    grouped = _group_poles(den_roots)
    stable, unstable = [], []
    for p in grouped:
        mag = abs(p)
        if abs(mag - 1.0) <= UNIT_CIRCLE_BAND:
            raise InversionError(f"pole {p} lies on the unit circle")
        pair = [p, np.conj(p)] if p.imag != 0 else [p]
        (unstable if mag > 1.0 else stable).extend(pair if mag <= 1.0 else [p])
    stable_den = _poly_from_roots(stable) * H.den[-1]
    stable_part = RationalTransferFunction(H.num, stable_den, H.Ts)
    return stable_part, unstable


def zpetc_factor(p, Ts=None):
    """Zero-phase approximation of 1/(z - p) (or of a conjugate pair).

    Real p: (1 - p z) / ((1 - p)^2 z).
    Complex p: (1 - 2 Re(p) z + |p|^2 z^2) / (|1 - p|^4 z^2), approximating
    1/((z - p)(z - conj p)).
    Returns ``(fir, extra_preview)``.
    """
    p = complex(p)
    if p.imag == 0:
        pr = p.real
        if pr == 1.0:
            raise InversionError("ZPETC undefined for p = 1")
        return RationalTransferFunction([1.0, -pr], [0.0, (1.0 - pr) ** 2], Ts), 1
    g = abs(1.0 - p) ** 4
    if g == 0:
        raise InversionError("ZPETC undefined for p = 1")
    return RationalTransferFunction([1.0, -2 * p.real, abs(p) ** 2], [0.0, 0.0, g], Ts), 2


def noncausal_expand(p, order: int):
    """Truncated anti-causal series of 1/(z - p) (or of a conjugate pair).

    Returns ``(coeffs, extra_preview, tail_bound)`` where ``coeffs[i]``
    multiplies z**i and ``tail_bound`` bounds the dropped terms on |z| = 1.
    """
    if order < 1:
        raise InversionError("order must be >= 1")
    p = complex(p)
    if abs(p) <= 1:
        raise InversionError("non-causal expansion needs |p| > 1")
    i = np.arange(order + 1)
    rho = 1.0 / abs(p)
    if p.imag == 0:
        coeffs = -(p.real ** -(i + 1.0))
        tail = rho ** (order + 2) / (1.0 - rho)
        return coeffs, order + 1, float(tail)
    q = np.conj(p)
    coeffs = ((q ** -(i + 1.0) - p ** -(i + 1.0)) / (p - q)).real
    # |c_i| <= (i+1) rho^(i+2); closed-form sum over i > order
    m = order + 1
    tail = rho ** (m + 2) * ((m + 1) - m * rho) / (1.0 - rho) ** 2
    return coeffs, order + 2, float(tail)


def assemble_stable_ff(ff: FeedforwardRealization, method="zpetc", order=None) -> StableInverseFF:
    """Stable feedforward filter K_ff with u_ff(k) = K_ff(z) r(k + eta0 + n_ep)."""
    stable_part, unstable = factor_unstable(ff)
    num, den = stable_part.num, stable_part.den
    extra = 0
    tail = 0.0
    if method == "zpetc":
        for p in unstable:
            fir, ep = zpetc_factor(p, ff.Ts)
            num, den = _P.polymul(num, fir.num), _P.polymul(den, fir.den)
            extra += ep
    elif method == "noncausal":
        if order is None or order < 1:
            raise InversionError("non-causal inversion needs an expansion order")
        for p in unstable:
            coeffs, ep, tb = noncausal_expand(p, order)
            num = _P.polymul(num, coeffs)
            extra += ep
            tail += tb
    else:
        raise InversionError(f"unknown stable-inversion method {method!r}")
    # series coefficients decay geometrically; only exact zeros are dropped
    num = Polynomial(num).trim().coeffs
    den = Polynomial(den).trim().coeffs
    n_num = len(num) - 1
    n_den = len(den) - 1
    n_ep = max(0, n_num - n_den)
    if n_ep != extra:
        raise InversionError(f"preview accounting mismatch ({n_ep} vs {extra})")
    den = np.concatenate([np.zeros(n_ep), den])
    lead = den[-1]
    kff = RationalTransferFunction(num / lead, den / lead, ff.Ts)
    poles = kff.poles()
    if len(poles) and np.max(np.abs(poles)) >= 1.0:
        raise InversionError("assembled feedforward is not stable")
    return StableInverseFF(kff, ff.eta0, n_ep, method, tuple(unstable),
                           order if method == "noncausal" else None, tail)


def design_stable_inverse(dss: DiscreteStateSpace, method="zpetc", order=None) -> StableInverseFF:
    return assemble_stable_ff(derive_feedforward(dss), method, order)


def _shifted(sff: StableInverseFF, x):
    x = np.asarray(x, dtype=float)
    P = sff.preview
    if len(x) <= P:
        raise InversionError(f"sequence shorter than the preview of {P} samples")
    return x, P


def linear_ff_input(sff: StableInverseFF, r) -> np.ndarray:
    """u_phy(k) = K_ff(z) r(k + P), k = 0..N-1; r is held at its final value beyond N."""
    r, P = _shifted(sff, r)
    ahead = np.concatenate([r[P:], np.full(P, r[-1])])
    return apply_tf_filter(sff.kff, ahead)


def inverse_prediction(sff: StableInverseFF, y_filtered) -> np.ndarray:
    """u_hat_phy(k) = K_ff(z) y(k + P) for k = 0..N-P-1 (length N - P)."""
    y, P = _shifted(sff, y_filtered)
    return apply_tf_filter(sff.kff, y[P:])


def residuals(u_d, u_hat_phy, preview: int) -> np.ndarray:
    """epsilon(k) = u(k) - u_hat_phy(k) over k = 0..N-P-1."""
    u_d = np.asarray(u_d, dtype=float)
    u_hat_phy = np.asarray(u_hat_phy, dtype=float)
    if len(u_hat_phy) != len(u_d) - preview:
        raise InversionError(
            f"length mismatch: prediction has {len(u_hat_phy)} samples, "
            f"expected {len(u_d) - preview}")
    return u_d[: len(u_hat_phy)] - u_hat_phy
