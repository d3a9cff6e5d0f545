"""Pure NumPy RK4 kernel for batched linear companion systems.

Reference implementation of the compiled kernel in ``_rk4_ext.pyx``; both
expose the same two functions with the same array conventions:

    G   (B, L, KL)  top-block coefficients [C0 | C1 | ... | C_{K-1}]
    b   (B, L)      offset
    x0  (B, KL)     stacked initial state [z, z', ..., z^(K-1)]
    h   (B, S)      step sizes, only the first nsteps[b] are used
    nsteps (B,)     steps per trajectory

The state obeys x' = f(x) with f(x) = [x_1, ..., x_{K-1}, G x + b] (blocks
of length L). ``forward`` returns every state, shape (B, S+1, KL), plus the
number of differentiable steps per trajectory (``valid``). A trajectory that
leaves ``|x| <= guard`` stops at that step: ``valid`` records the step index
and the remaining states hold the offending state clipped to the guard.

``backward`` is the exact discrete adjoint of the forward stepping.
"""

import numpy as np


def _rhs(G, b, x, L):
    top = np.einsum("blk,bk->bl", G, x) + b
    return np.concatenate([x[:, L:], top], axis=1)


def _rhs_transpose(G, v, L):
    # J^T v for J = df/dx: block m gets v[m-1] (for m >= 1) + C_m^T v_last
    out = np.einsum("blk,bl->bk", G, v[:, -L:])
    out[:, L:] += v[:, :-L]
    return out


def forward(G, b, x0, h, nsteps, guard):
    B, L, KL = G.shape
    S = h.shape[1]
    X = np.empty((B, S + 1, KL))
    X[:, 0] = x0
    valid = np.array(nsteps, dtype=np.int64, copy=True)
    alive = np.ones(B, dtype=bool)
    for s in range(S):
        x = X[:, s]
        hs = h[:, s][:, None]
        k1 = _rhs(G, b, x, L)
        k2 = _rhs(G, b, x + 0.5 * hs * k1, L)
        k3 = _rhs(G, b, x + 0.5 * hs * k2, L)
        k4 = _rhs(G, b, x + hs * k3, L)
        xn = x + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        step = alive & (s < nsteps)
        X[:, s + 1] = np.where(step[:, None], xn, x)
        bad = step & ~np.all(np.abs(xn) <= guard, axis=1)
        if bad.any():
            valid[bad] = s
            alive &= ~bad
            X[bad, s + 1] = np.clip(np.nan_to_num(xn[bad], posinf=guard, neginf=-guard), -guard, guard)
    return X, valid


def backward(G, b, X, h, valid, gX):
    B, L, KL = G.shape
    S = h.shape[1]
    gG = np.zeros_like(G)
    gb = np.zeros_like(b)
    lam = np.zeros((B, KL))
    for s in range(S - 1, -1, -1):
        act = s < valid
        if not act.any():
            continue
        m = act[:, None]
        lam = lam + np.where(m, gX[:, s + 1], 0.0)
        hs = np.where(act, h[:, s], 0.0)[:, None]
        x = X[:, s]
        k1 = _rhs(G, b, x, L)
        y2 = x + 0.5 * hs * k1
        k2 = _rhs(G, b, y2, L)
        y3 = x + 0.5 * hs * k2
        k3 = _rhs(G, b, y3, L)
        y4 = x + hs * k3
        lam_m = np.where(m, lam, 0.0)
        g4 = hs / 6.0 * lam_m
        g3 = hs / 3.0 * lam_m
        g2 = hs / 3.0 * lam_m
        g1 = hs / 6.0 * lam_m
        xbar = lam_m.copy()
        gG += np.einsum("bl,bk->blk", g4[:, -L:], y4)
        gb += g4[:, -L:]
        ybar = _rhs_transpose(G, g4, L)
        xbar += ybar
        g3 = g3 + hs * ybar
        gG += np.einsum("bl,bk->blk", g3[:, -L:], y3)
        gb += g3[:, -L:]
        ybar = _rhs_transpose(G, g3, L)
        xbar += ybar
        g2 = g2 + 0.5 * hs * ybar
        gG += np.einsum("bl,bk->blk", g2[:, -L:], y2)
        gb += g2[:, -L:]
        ybar = _rhs_transpose(G, g2, L)
        xbar += ybar
        g1 = g1 + 0.5 * hs * ybar
        gG += np.einsum("bl,bk->blk", g1[:, -L:], x)
        gb += g1[:, -L:]
        xbar += _rhs_transpose(G, g1, L)
        lam = np.where(m, xbar, lam)
    gx0 = lam + gX[:, 0]
    return gG, gb, gx0
