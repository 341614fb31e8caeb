"""Linear time-invariant system core.

Discretization (ZOH, Tustin), characteristic polynomials, polynomial roots,
state-space to transfer-function conversion, simulation and filtering.

Polynomial coefficient arrays are stored in *ascending* powers throughout,
i.e. ``c[0] + c[1] z + c[2] z**2 + ...``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, log2

import numpy as np
from scipy.signal import lfilter


class RootFindingError(RuntimeError):
    """Raised when the simultaneous root iteration fails to converge."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


def _as_matrix(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class ContinuousStateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        if B.shape[0] != A.shape[0] and B.shape[1] == A.shape[0]:
            B = B.T
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise ValueError("inconsistent state-space dimensions")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)


@dataclass(frozen=True)
class DiscreteStateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Ts: float
    D: np.ndarray = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        if B.shape[0] != A.shape[0] and B.shape[1] == A.shape[0]:
            B = B.T
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise ValueError("inconsistent state-space dimensions")
        if not self.Ts > 0:
            raise ValueError("sampling time must be positive")
        D = np.zeros((C.shape[0], B.shape[1])) if self.D is None else _as_matrix(self.D, "D")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError("inconsistent feedthrough dimensions")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "Ts", float(self.Ts))

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def is_siso(self):
        return self.B.shape[1] == 1 and self.C.shape[0] == 1


@dataclass(frozen=True)
class Polynomial:
    """Real polynomial with ascending coefficients."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        if c.size == 0:
            c = np.zeros(1)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self):
        nz = np.flatnonzero(self.coeffs)
        return int(nz[-1]) if nz.size else 0

    def trim(self, rtol=0.0):
        c = self.coeffs
        scale = np.max(np.abs(c)) if c.size else 0.0
        k = c.size
        while k > 1 and abs(c[k - 1]) <= rtol * scale:
            k -= 1
        return Polynomial(c[:k])

    def __call__(self, z):
        return np.polynomial.polynomial.polyval(z, self.coeffs)

    def __mul__(self, other):
        other = other.coeffs if isinstance(other, Polynomial) else other
        return Polynomial(np.polynomial.polynomial.polymul(self.coeffs, other))

    def roots(self):
        return polynomial_roots(self)


@dataclass(frozen=True)
class RationalTransferFunction:
    """SISO rational function num(z)/den(z), coefficients ascending in z.

    ``Ts=None`` marks a continuous-time function of the Laplace variable.
    """

    num: np.ndarray
    den: np.ndarray
    Ts: float | None = None

    def __post_init__(self):
        num = Polynomial(self.num).trim().coeffs
        den = Polynomial(self.den).trim().coeffs
        if den[-1] == 0:
            raise ValueError("denominator is identically zero")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @property
    def num_degree(self):
        return Polynomial(self.num).degree

    @property
    def den_degree(self):
        return Polynomial(self.den).degree

    @property
    def is_proper(self):
        return self.num_degree <= self.den_degree

    def __call__(self, z):
        return (np.polynomial.polynomial.polyval(z, self.num)
                / np.polynomial.polynomial.polyval(z, self.den))

    def __mul__(self, other):
        if isinstance(other, RationalTransferFunction):
            if (self.Ts is None) != (other.Ts is None) or (
                    self.Ts is not None and self.Ts != other.Ts):
                raise ValueError("cannot combine transfer functions with different Ts")
            return RationalTransferFunction(
                np.polynomial.polynomial.polymul(self.num, other.num),
                np.polynomial.polynomial.polymul(self.den, other.den), self.Ts)
        return RationalTransferFunction(self.num * float(other), self.den, self.Ts)

    __rmul__ = __mul__

    def normalized(self):
        """Return an equivalent function with a monic denominator."""
        lead = self.den[-1]
        return RationalTransferFunction(self.num / lead, self.den / lead, self.Ts)

    def poles(self):
        return polynomial_roots(Polynomial(self.den)) if self.den_degree else np.array([])

    def zeros(self):
        return polynomial_roots(Polynomial(self.num)) if self.num_degree else np.array([])

    def frequency_response(self, omega):
        """Evaluate at z = exp(j*omega) (discrete) or s = j*omega (continuous)."""
        omega = np.asarray(omega, dtype=float)
        arg = 1j * omega if self.Ts is None else np.exp(1j * omega)
        return self(arg)

    def as_lfilter(self):
        """(b, a) arrays in ascending powers of z^-1 for scipy.signal.lfilter."""
        if not self.is_proper:
            raise ValueError("improper transfer function")
        n = self.den_degree
        b = np.zeros(n + 1)
        b[: self.num_degree + 1] = self.num[: self.num_degree + 1]
        return b[::-1].copy(), self.den[: n + 1][::-1].copy()


# Padé(6,6) coefficients for exp(x)
_PADE6 = (1.0, 1 / 2, 5 / 44, 1 / 66, 1 / 792, 1 / 15840, 1 / 665280)


def expm(M):
    """Matrix exponential via scaling and squaring with a [6/6] Padé approximant."""
    M = _as_matrix(M, "M")
    n = M.shape[0]
    norm = np.max(np.sum(np.abs(M), axis=0)) if n else 0.0
    s = max(0, int(ceil(log2(norm / 0.5)))) if norm > 0.5 else 0
    X = M / 2.0**s
    ident = np.eye(n)
    P = np.zeros_like(X)
    Q = np.zeros_like(X)
    power = ident
    for k, c in enumerate(_PADE6):
        if k:
            power = power @ X
        P += c * power
        Q += (-1) ** k * c * power
    E = np.linalg.solve(Q, P)
    for _ in range(s):
        E = E @ E
    return E


def zoh_discretize(css: ContinuousStateSpace, Ts: float) -> DiscreteStateSpace:
    """Zero-order-hold discretization using the augmented exponential."""
    if not Ts > 0:
        raise ValueError("sampling time must be positive")
    n, m = css.B.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = css.A
    aug[:n, n:] = css.B
    E = expm(aug * Ts)
    return DiscreteStateSpace(E[:n, :n], E[:n, n:], css.C.copy(), Ts)


def tustin_discretize(tf_s: RationalTransferFunction, Ts: float) -> RationalTransferFunction:
    """Bilinear substitution s <- (2/Ts)(z-1)/(z+1), monic denominator."""
    if tf_s.Ts is not None:
        raise ValueError("expected a continuous-time transfer function")
    if not Ts > 0:
        raise ValueError("sampling time must be positive")
    if not tf_s.is_proper:
        raise ValueError("Tustin discretization needs a proper transfer function")
    P = np.polynomial.polynomial
    n = tf_s.den_degree
    zm1 = np.array([-1.0, 1.0])
    zp1 = np.array([1.0, 1.0])

    def substitute(c):
        out = np.zeros(n + 1)
        for i, ci in enumerate(c[: n + 1]):
            if ci == 0:
                continue
            term = ci * (2.0 / Ts) ** i * P.polymul(P.polypow(zm1, i), P.polypow(zp1, n - i))
            out[: term.size] += term
        return out

    num = substitute(tf_s.num)
    den = substitute(tf_s.den)
    if abs(den[-1]) <= 1e-14 * np.max(np.abs(den)):
        raise ValueError("degenerate denominator after Tustin substitution")
    return RationalTransferFunction(num / den[-1], den / den[-1], Ts)


def _faddeev_leverrier(M):
    """Characteristic coefficients (ascending) and adjugate coefficient matrices.

    adj(zI - M) = sum_{k=1..n} Mk[k-1] z^(n-k)
    """
    M = _as_matrix(M, "M")
    n = M.shape[0]
    if M.shape != (n, n):
        raise ValueError("matrix must be square")
    c = np.zeros(n + 1)
    c[n] = 1.0
    ident = np.eye(n)
    Mk = np.zeros_like(M)
    mats = []
    for k in range(1, n + 1):
        Mk = M @ Mk + c[n - k + 1] * ident
        mats.append(Mk)
        c[n - k] = -np.trace(M @ Mk) / k
    return c, mats


def characteristic_polynomial(M) -> Polynomial:
    """det(zI - M) via the Faddeev-LeVerrier recursion."""
    c, _ = _faddeev_leverrier(M)
    return Polynomial(c)


def polynomial_roots(p: Polynomial, tol=1e-10, maxiter=200):
    """All complex roots by Aberth-Ehrlich simultaneous iteration."""
    p = p if isinstance(p, Polynomial) else Polynomial(p)
    c = p.trim().coeffs
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite coefficients")
    n = c.size - 1
    if n < 1:
        raise ValueError("polynomial must have degree >= 1")
    # Zero roots are split off exactly.
    nzero = int(np.argmax(c != 0))
    c = c[nzero:]
    n = c.size - 1
    if n == 0:
        return np.zeros(nzero, dtype=complex)
    a = c / c[-1]
    # Rescale so the roots are O(1): z = scale * w.
    scale = max(abs(a[i]) ** (1.0 / (n - i)) for i in range(n))
    scale = scale if scale > 0 else 1.0
    # in log space so subnormal or huge scales cannot overflow
    with np.errstate(divide="ignore"):
        logw = np.log(np.abs(a)) + (np.arange(n + 1) - n) * np.log(scale)
    w = np.sign(a) * np.exp(logw)
    absw = np.abs(w)
    dw = w[1:] * np.arange(1, n + 1)

    center = -w[n - 1] / n
    radius = max(abs(np.polynomial.polynomial.polyval(center, w)) ** (1.0 / n), 0.1)
    angles = 2 * np.pi * np.arange(n) / n + 0.4
    z = center + radius * np.exp(1j * angles)

    def backward_error(zz):
        num = np.abs(np.polynomial.polynomial.polyval(zz, w))
        den = np.polynomial.polynomial.polyval(np.abs(zz), absw)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(num == 0, 0.0, num / den)

    eps = np.finfo(float).eps
    for _ in range(maxiter):
        pz = np.polynomial.polynomial.polyval(z, w)
        dpz = np.polynomial.polynomial.polyval(z, dw)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = pz / dpz
            diff = z[:, None] - z[None, :]
            np.fill_diagonal(diff, 1.0)
            inv = 1.0 / diff
            np.fill_diagonal(inv, 0.0)
            corr = ratio / (1.0 - ratio * inv.sum(axis=1))
        corr = np.where(np.isfinite(corr), corr, 0.0)
        done = (pz == 0) | (np.abs(corr) <= 4 * eps * np.abs(z))
        z = np.where(done, z, z - corr)
        if np.all(done) or np.all(backward_error(z) <= 4 * n * eps):
            break
    be = backward_error(z)
    if not np.all(be <= tol):
        raise RootFindingError(
            f"root iteration did not converge (max backward error {be.max():.3e})",
            z * scale)
    roots = z * scale
    return np.concatenate([np.zeros(nzero, dtype=complex), roots])


def ss_to_tf(dss: DiscreteStateSpace) -> RationalTransferFunction:
    """C (zI - A)^-1 B + D for a SISO system."""
    if not dss.is_siso:
        raise ValueError("ss_to_tf requires a SISO system")
    c, mats = _faddeev_leverrier(dss.A)
    n = dss.n_states
    num = np.zeros(n + 1)
    for k, Mk in enumerate(mats, start=1):
        num[n - k] = (dss.C @ Mk @ dss.B).item()
    num = num + dss.D.item() * c
    num = Polynomial(num).trim(rtol=1e-12).coeffs
    return RationalTransferFunction(num, c, dss.Ts)


def simulate_lti(dss: DiscreteStateSpace, u, x0=None):
    """y(k) = C x(k) + D u(k), x(k+1) = A x(k) + B u(k)."""
    u = np.asarray(u, dtype=float)
    squeeze = u.ndim == 1
    u = u.reshape(len(u), -1)
    if len(u) < 1:
        raise ValueError("input must have at least one sample")
    x = np.zeros(dss.n_states) if x0 is None else np.asarray(x0, dtype=float).copy()
    A, B, C, D = dss.A, dss.B, dss.C, dss.D
    y = np.empty((len(u), C.shape[0]))
    for k in range(len(u)):
        y[k] = C @ x + D @ u[k]
        x = A @ x + B @ u[k]
    return y[:, 0] if squeeze and y.shape[1] == 1 else y


def apply_tf_filter(tf: RationalTransferFunction, u):
    """Causal filtering with zero initial conditions."""
    if not tf.is_proper:
        raise ValueError(
            "improper transfer function: shift the input by the required "
            "preview and pass a proper filter")
    b, a = tf.as_lfilter()
    return lfilter(b, a, np.asarray(u, dtype=float))


@dataclass
class StreamingFilter:
    """Sample-by-sample transposed direct form II realization of a proper tf."""

    tf: RationalTransferFunction
    _b: list = field(init=False, repr=False)
    _a: list = field(init=False, repr=False)
    _z: list = field(init=False, repr=False)

    def __post_init__(self):
        b, a = self.tf.as_lfilter()
        self._b = [float(v) / a[0] for v in b]
        self._a = [float(v) / a[0] for v in a]
        self._z = [0.0] * (len(self._a) - 1)

    def reset(self):
        self._z = [0.0] * (len(self._a) - 1)

    def step(self, x):
        b, a, z = self._b, self._a, self._z
        y = b[0] * x + (z[0] if z else 0.0)
        n = len(z)
        for i in range(n - 1):
            z[i] = z[i + 1] + b[i + 1] * x - a[i + 1] * y
        if n:
            z[n - 1] = b[n] * x - a[n] * y
        return y


def tf_to_ss(tf: RationalTransferFunction) -> DiscreteStateSpace:
    """Controllable canonical realization of a proper discrete tf."""
    b, a = tf.as_lfilter()
    b = b / a[0]
    a = a / a[0]
    n = len(a) - 1
    d = b[0]
    if n == 0:
        return DiscreteStateSpace(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), tf.Ts, [[d]])
    A = np.zeros((n, n))
    A[0, :] = -a[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = (b[1:] - d * a[1:]).reshape(1, n)
    return DiscreteStateSpace(A, B, C, tf.Ts, [[d]])
