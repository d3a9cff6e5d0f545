"""Finite-difference stencils on nonuniform grids.

The closed forms below give O(h^2) approximations of f' (three points) and
f'' (four points) when the spacings differ from point to point. They are
what the training losses use. ``general_stencil`` solves the moment system
for any number of points and is kept as an independent check on the closed
forms (and for the O(h^4) time derivative of the 1-D Burgers solver).

Applying a scheme to a whole time series costs O(N): every coefficient is a
rational function of neighbouring spacings, evaluated with a handful of
vectorized passes over ``np.diff(times)``.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateGridError, InsufficientPointsError, InvalidArgumentError

SPACING_RATIO_WARN = 100.0


@dataclass(frozen=True)
class Stencil:
    offsets: np.ndarray
    coefficients: np.ndarray
    derivative_order: int
    accuracy_order: int

    def apply(self, f, x=0.0):
        """Approximate f^(d)(x) for a callable ``f``."""
        return float(np.dot(self.coefficients, f(x + self.offsets)))


@dataclass(frozen=True)
class SeriesDerivative:
    times: np.ndarray
    values: np.ndarray
    derivative_order: int


def _check_spacing(*h):
    for v in h:
        if not (np.isfinite(v) and v > 0):
            raise InvalidArgumentError(f"spacings must be positive and finite, got {h}")


def _first_coefficients(a, b, mode):
    # a, b are floats or arrays; returns the three coefficients ordered by offset
    if mode == "forward":
        return (-(2 * a + b) / (a * (a + b)), (a + b) / (a * b), -a / (b * (a + b)))
    if mode == "central":
        return (-b / (a * (a + b)), (b - a) / (a * b), a / (b * (a + b)))
    if mode == "backward":
        return (a / (b * (a + b)), -(a + b) / (a * b), (2 * a + b) / (a * (a + b)))
    raise InvalidArgumentError(f"unknown mode {mode!r}")


def _second_coefficients(a, b, c, mode):
    if mode in ("forward", "backward"):
        s = a + b + c
        coeffs = (
            2 * (3 * a + 2 * b + c) / (a * (a + b) * s),
            -2 * (2 * a + 2 * b + c) / (a * b * (b + c)),
            2 * (2 * a + b + c) / (b * c * (a + b)),
            -2 * (2 * a + b) / (s * (b + c) * c),
        )
        # f'' is even under reflection: backward weights are the forward ones reversed
        return coeffs if mode == "forward" else coeffs[::-1]
    if mode == "mixed":
        s = a + b + c
        return (
            2 * (2 * b + c) / (a * (a + b) * s),
            -2 * (b * (a + 2 * b + 3 * c) + c * c - a * a) / (b * a * (b + c) * s),
            2 * (b + c - a) / (b * c * (a + b)),
            -2 * (b - a) / (c * (b + c) * s),
        )
    raise InvalidArgumentError(f"unknown mode {mode!r}")


def stencil_first(a, b, mode="central"):
    """Three-point O(h^2) stencil for f'.

    Spacings follow the point layout of each mode:

    - forward:  x, x+a, x+a+b
    - central:  x-a, x, x+b
    - backward: x-a-b, x-a, x  (``a`` is the gap next to x)
    """
    a, b = float(a), float(b)
    _check_spacing(a, b)
    offsets = {
        "forward": (0.0, a, a + b),
        "central": (-a, 0.0, b),
        "backward": (-a - b, -a, 0.0),
    }.get(mode)
    if offsets is None:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    return Stencil(np.array(offsets), np.array(_first_coefficients(a, b, mode)), 1, 2)


def stencil_second(a, b, c, mode="mixed"):
    """Four-point O(h^2) stencil for f''.

    - forward:  x, x+a, x+a+b, x+a+b+c
    - mixed:    x-a, x, x+b, x+b+c
    - backward: x-a-b-c, x-a-b, x-a, x  (``a`` is the gap next to x)
    """
    a, b, c = float(a), float(b), float(c)
    _check_spacing(a, b, c)
    offsets = {
        "forward": (0.0, a, a + b, a + b + c),
        "mixed": (-a, 0.0, b, b + c),
        "backward": (-a - b - c, -a - b, -a, 0.0),
    }.get(mode)
    if offsets is None:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    return Stencil(np.array(offsets), np.array(_second_coefficients(a, b, c, mode)), 2, 2)


def general_stencil(offsets, d, k):
    """Weights for f^(d) of order O(h^k) from ``k + d`` sample offsets.

    Solves the moment system: sum_i c_i o_i^p = d! when p == d, else 0,
    for p = 0 .. k+d-1. Offsets are rescaled to unit size before the
    solve to keep the Vandermonde matrix well conditioned.
    """
    offsets = np.asarray(offsets, dtype=float)
    if d < 1 or k < 1:
        raise InvalidArgumentError("derivative and accuracy orders must be positive")
    n = k + d
    if offsets.shape != (n,):
        raise InvalidArgumentError(f"need exactly k + d = {n} offsets, got {offsets.shape}")
    if len(np.unique(offsets)) != n:
        raise DegenerateGridError(f"duplicate offsets in {offsets}")
    scale = np.max(np.abs(offsets))
    s = offsets / scale
    moments = np.vander(s, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[d] = math.factorial(d)
    try:
        coeffs = np.linalg.solve(moments, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGridError(f"singular moment matrix for offsets {offsets}") from exc
    return Stencil(offsets, coeffs / scale**d, d, k)


def _validate_times(times, d):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise InvalidArgumentError("times must be one-dimensional")
    if len(times) < d + 2:
        raise InsufficientPointsError(f"need at least {d + 2} points for d={d}, got {len(times)}")
    h = np.diff(times)
    if np.any(h <= 0) or not np.all(np.isfinite(h)):
        raise InvalidArgumentError("times must be strictly increasing and finite")
    ratio = h.max() / h.min()
    if ratio > SPACING_RATIO_WARN:
        warnings.warn(
            f"adjacent spacing ratio {ratio:.1f} exceeds {SPACING_RATIO_WARN:g}; "
            "O(h^2) error bounds assume bounded ratios",
            RuntimeWarning,
            stacklevel=3,
        )
    return times, h


def series_weights(times, d):
    """Stencil columns and weights for every point of a series.

    Returns ``(columns, weights)``, both of shape (N, d + 2): row ``i`` holds
    the indices of the samples used at ``times[i]`` and their weights.
    Interior points use the central (d=1) or mixed (d=2) scheme; the edges use
    forward / backward schemes.
    """
    if d not in (1, 2):
        raise InvalidArgumentError(f"only d=1 and d=2 are supported, got {d}")
    times, h = _validate_times(times, d)
    n = len(times)
    w = d + 2
    cols = np.empty((n, w), dtype=np.int64)
    wts = np.empty((n, w))

    if d == 1:
        cols[0] = (0, 1, 2)
        wts[0] = _first_coefficients(h[0], h[1], "forward")
        idx = np.arange(1, n - 1)
        cols[1:-1] = idx[:, None] + np.array([-1, 0, 1])
        wts[1:-1] = np.stack(_first_coefficients(h[:-1], h[1:], "central"), axis=1)
        cols[-1] = (n - 3, n - 2, n - 1)
        wts[-1] = _first_coefficients(h[-1], h[-2], "backward")
        return cols, wts

    # d == 2 uses a window of four consecutive samples. Preferred window start:
    # forward on the first two points, mixed in the interior, backward on the
    # last two; clipped into range (only matters for n == 4).
    idx = np.arange(n)
    start = idx - 1
    start[:2] = idx[:2]
    start[-2:] = idx[-2:] - 3
    start = np.clip(start, 0, n - 4)
    pos = idx - start
    g1, g2, g3 = h[start], h[start + 1], h[start + 2]
    cols[:] = start[:, None] + np.arange(4)
    for p in range(4):
        m = pos == p
        if not m.any():
            continue
        if p == 0:
            c = _second_coefficients(g1[m], g2[m], g3[m], "forward")
        elif p == 1:
            c = _second_coefficients(g1[m], g2[m], g3[m], "mixed")
        elif p == 2:
            # mirror image of the mixed layout: two samples behind, one ahead
            c = _second_coefficients(g3[m], g2[m], g1[m], "mixed")[::-1]
        else:
            c = _second_coefficients(g3[m], g2[m], g1[m], "backward")
        wts[m] = np.stack(c, axis=1)
    return cols, wts


def derivative_matrix(times, d):
    """Sparse (N, N) operator D with D @ values == d-th derivative estimate."""
    cols, wts = series_weights(times, d)
    n = len(cols)
    rows = np.repeat(np.arange(n), cols.shape[1])
    return sp.csr_matrix((wts.ravel(), (rows, cols.ravel())), shape=(n, n))


def differentiate_series(times, values, d):
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape[0] != times.shape[0]:
        raise InvalidArgumentError("values must have one row per time")
    cols, wts = series_weights(times, d)
    flat = values.reshape(len(times), -1)
    out = np.einsum("nw,nwc->nc", wts, flat[cols])
    return SeriesDerivative(times, out.reshape(values.shape), d)
