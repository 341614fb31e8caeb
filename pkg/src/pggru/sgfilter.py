"""Savitzky-Golay smoothing for measured outputs and references."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SavGolFilter:
    """Centered smoothing filter F(z) = sum_i C_i z^i, i = -(m-1)/2 .. (m-1)/2.

    ``coeffs[j]`` multiplies the sample at offset ``j - (m-1)/2``.
    """

    order: int
    window: int
    coeffs: np.ndarray
    passes: int = 1

    @property
    def half(self):
        return (self.window - 1) // 2


def design_savgol(order: int, m: int, passes: int = 1) -> SavGolFilter:
    """Least-squares smoothing coefficients evaluated at the window center."""
    if m < 1 or m % 2 == 0:
        raise ValueError("window size must be a positive odd integer")
    if order < 0 or order >= m:
        raise ValueError("polynomial order must satisfy 0 <= order < window")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    half = (m - 1) // 2
    # Offsets scaled to [-1, 1] keep the normal equations well conditioned.
    t = np.arange(-half, half + 1) / max(half, 1)
    V = np.vander(t, order + 1, increasing=True)
    # The fitted value at t=0 is the constant term of the LS solution.
    coeffs = np.linalg.pinv(V)[0]
    coeffs = 0.5 * (coeffs + coeffs[::-1])
    return SavGolFilter(order, m, coeffs, passes)


def apply_centered(f: SavGolFilter, x) -> np.ndarray:
    """Non-causal filtering, ``f.passes`` times, replicate-edge padding."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D sequence")
    if len(x) < f.window:
        raise ValueError(f"sequence shorter than the filter window ({f.window})")
    h = f.half
    out = x
    for _ in range(f.passes):
        padded = np.concatenate([np.full(h, out[0]), out, np.full(h, out[-1])])
        # coefficients are symmetric, so correlation and convolution coincide
        out = np.convolve(padded, f.coeffs[::-1], mode="valid")
    return out


def default_filter() -> SavGolFilter:
    """Order 3, 141-sample window, applied twice."""
    return design_savgol(3, 141, passes=2)
