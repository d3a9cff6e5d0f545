"""Order-K linear latent dynamics and their RK4 integration.

The latent state obeys

    z^(K) = C_{K-1} z^(K-1) + ... + C_0 z + b

which is integrated in companion form x = [z, z', ..., z^(K-1)] (length KL).
The coefficient set for one parameter value is stored compactly as an
(L, KL + 1) matrix ``[C_0 | C_1 | ... | C_{K-1} | b]``; the GP ensemble fits
one regressor per entry of that matrix.

``integrate_batch`` is the workhorse: it integrates many trajectories at
once with the compiled (or NumPy) kernel and, when given tensors, records a
single fused node whose backward pass is the exact discrete adjoint.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, InvalidArgumentError, ShapeError
from .kernels import rk4_backward, rk4_forward
from .stencils import differentiate_series

DIVERGENCE_GUARD = 1e6


@dataclass
class LatentCoefficients:
    C: list
    b: np.ndarray

    @classmethod
    def zeros(cls, K, L):
        return cls([np.zeros((L, L)) for _ in range(K)], np.zeros(L))

    @property
    def K(self):
        return len(self.C)

    @property
    def L(self):
        return len(self.b)

    def to_matrix(self):
        return np.concatenate([*self.C, self.b[:, None]], axis=1)

    @classmethod
    def from_matrix(cls, M, K):
        M = np.asarray(M, dtype=float)
        L = M.shape[0]
        if M.shape != (L, K * L + 1):
            raise ShapeError(f"coefficient matrix must be ({L}, {K * L + 1}), got {M.shape}")
        return cls([M[:, k * L:(k + 1) * L].copy() for k in range(K)], M[:, -1].copy())

    def validate(self):
        for c in self.C:
            if c.shape != (self.L, self.L):
                raise ShapeError(f"C blocks must be ({self.L}, {self.L}), got {c.shape}")
        if not all(np.all(np.isfinite(c)) for c in self.C) or not np.all(np.isfinite(self.b)):
            raise InvalidArgumentError("latent coefficients must be finite")


@dataclass
class LatentState:
    derivatives: list

    @property
    def K(self):
        return len(self.derivatives)

    def stacked(self):
        return np.concatenate([np.asarray(d, dtype=float) for d in self.derivatives])

    @classmethod
    def from_stacked(cls, x, K):
        return cls(list(np.split(np.asarray(x, dtype=float), K)))


@dataclass
class LatentTrajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, K, L)

    def derivative(self, k):
        return self.states[:, k, :]


def rhs(coeffs, state):
    """Top latent derivative C_{K-1} z^(K-1) + ... + C_0 z + b."""
    if coeffs.K != state.K:
        raise ShapeError(f"coefficients have K={coeffs.K} but the state has K={state.K}")
    out = np.array(coeffs.b, dtype=float)
    for c, z in zip(coeffs.C, state.derivatives):
        out = out + c @ z
    return out


def _value(x):
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x, dtype=float)


def integrate_batch(G, b, x0, h, nsteps, guard=DIVERGENCE_GUARD, on_divergence="clamp"):
    """Integrate B companion systems with fixed-step RK4.

    G (B, L, KL), b (B, L) and x0 (B, KL) may be arrays or tensors; h is
    (B, S) step sizes and nsteps (B,) the steps taken by each trajectory.
    Returns the states (B, S+1, KL) as a tensor (recorded if any input
    requires gradients) and the per-trajectory number of valid steps.

    With ``on_divergence="raise"`` leaving the guard raises DivergenceError;
    with ``"clamp"`` the offending state is clipped to the guard and held,
    and no gradient flows through the clipped part.
    """
    Gv, bv, xv = _value(G), _value(b), _value(x0)
    h = np.ascontiguousarray(h, dtype=float)
    nsteps = np.ascontiguousarray(nsteps, dtype=np.int64)
    B, L, KL = Gv.shape
    if bv.shape != (B, L) or xv.shape != (B, KL) or h.shape[0] != B or nsteps.shape != (B,):
        raise ShapeError("integrate_batch: inconsistent batch shapes")
    if KL % L:
        raise ShapeError(f"state width {KL} is not a multiple of L={L}")
    if np.any(nsteps > h.shape[1]) or np.any(nsteps < 0):
        raise InvalidArgumentError("nsteps must lie in [0, h.shape[1]]")
    Gc, bc, xc = (np.ascontiguousarray(a, dtype=float) for a in (Gv, bv, xv))
    X, valid = rk4_forward(Gc, bc, xc, h, nsteps, float(guard))
    diverged = valid < nsteps
    if on_divergence == "raise" and diverged.any():
        i = int(np.argmax(diverged))
        raise DivergenceError(
            f"latent state left |x| <= {guard:g} at step {int(valid[i])} of trajectory {i}",
            step=int(valid[i]),
            context={"trajectory": i},
        )
    parents = tuple(ad.as_tensor(p) for p in (G, b, x0))

    def backward(g):
        gG, gb, gx0 = rk4_backward(Gc, bc, X, h, valid, np.ascontiguousarray(g))
        return tuple(gr if p.requires_grad else None for gr, p in zip((gG, gb, gx0), parents))

    return ad.custom_op(X, parents, backward, "rk4"), valid


def rk4_integrate(coeffs, initial, t0, t1, step_count, guard=DIVERGENCE_GUARD):
    """Integrate one latent system from t0 to t1 with ``step_count`` RK4 steps.

    Raises DivergenceError (with the failing step index) if any component
    leaves ``|x| <= guard``.
    """
    if t1 < t0:
        raise InvalidArgumentError("t1 must be >= t0")
    if step_count < 1:
        raise InvalidArgumentError("step_count must be >= 1")
    coeffs.validate()
    K, L = coeffs.K, coeffs.L
    times = np.linspace(t0, t1, step_count + 1)
    x0 = initial.stacked()
    if t1 == t0:
        states = np.repeat(x0[None], step_count + 1, axis=0)
        return LatentTrajectory(times, states.reshape(-1, K, L))
    G = np.concatenate(coeffs.C, axis=1)[None]
    h = np.full((1, step_count), (t1 - t0) / step_count)
    X, _ = integrate_batch(G, coeffs.b[None], x0[None], h, [step_count], guard, "raise")
    return LatentTrajectory(times, X.value[0].reshape(-1, K, L))


def integrate_on_grid(coeffs, initial, times, guard=DIVERGENCE_GUARD):
    """One RK4 step per interval of ``times`` (which may be nonuniform)."""
    times = np.asarray(times, dtype=float)
    coeffs.validate()
    K, L = coeffs.K, coeffs.L
    h = np.diff(times)[None]
    G = np.concatenate(coeffs.C, axis=1)[None]
    X, _ = integrate_batch(G, coeffs.b[None], initial.stacked()[None], h, [h.shape[1]], guard, "raise")
    return LatentTrajectory(times, X.value[0].reshape(-1, K, L))


def check_convex(weights):
    w1, w2 = (float(w) for w in weights)
    if w1 < 0 or w2 < 0 or abs(w1 + w2 - 1.0) > 1e-12:
        raise InvalidArgumentError(f"top-derivative weights must be convex, got ({w1}, {w2})")
    return w1, w2


def estimate_top_derivative(encoded, times, weights=(1.0, 0.0)):
    """Estimate z^(K) from the K encoded series on a shared time grid.

    Mixes the first derivative of series K-1 with the second derivative of
    series K-2. With K == 1 only the first branch exists.
    """
    w1, w2 = check_convex(weights)
    K = len(encoded)
    if K < 1:
        raise InvalidArgumentError("need at least one encoded series")
    if K == 1:
        if w2 != 0:
            raise InvalidArgumentError("K=1 admits only the first-derivative branch (w1 = 1)")
        return differentiate_series(times, encoded[0], 1).values
    out = w1 * differentiate_series(times, encoded[K - 1], 1).values
    if w2:
        out = out + w2 * differentiate_series(times, encoded[K - 2], 2).values
    return out
