# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RK4 kernel for batched linear companion systems.

Same contract as ``horom._rk4_numpy``: see that module for the array
conventions. Loops run trajectory by trajectory, so padded steps cost
nothing and the stage vectors stay in a small scratch buffer.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline void _rhs(double[:, :] G, double[:] b, double* x, double* out,
                      Py_ssize_t L, Py_ssize_t KL) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(KL - L):
        out[i] = x[i + L]
    for i in range(L):
        acc = b[i]
        for j in range(KL):
            acc += G[i, j] * x[j]
        out[KL - L + i] = acc


cdef inline void _rhs_t(double[:, :] G, double* v, double* out,
                        Py_ssize_t L, Py_ssize_t KL) noexcept nogil:
    # out += J^T v
    cdef Py_ssize_t i, j
    cdef double acc
    for j in range(KL):
        acc = 0.0
        for i in range(L):
            acc += G[i, j] * v[KL - L + i]
        if j >= L:
            acc += v[j - L]
        out[j] += acc


def forward(double[:, :, :] G, double[:, :] b, double[:, :] x0, double[:, :] h,
            cnp.int64_t[:] nsteps, double guard):
    cdef Py_ssize_t B = G.shape[0], L = G.shape[1], KL = G.shape[2]
    cdef Py_ssize_t S = h.shape[1]
    X_arr = np.empty((B, S + 1, KL))
    valid_arr = np.array(nsteps, dtype=np.int64, copy=True)
    cdef double[:, :, :] X = X_arr
    cdef cnp.int64_t[:] valid = valid_arr
    work_arr = np.empty(5 * KL)
    cdef double[:] work = work_arr
    cdef double* k1 = &work[0]
    cdef double* k2 = &work[KL]
    cdef double* k3 = &work[2 * KL]
    cdef double* k4 = &work[3 * KL]
    cdef double* y = &work[4 * KL]
    cdef Py_ssize_t bi, s, i, n, last
    cdef double hs, v
    cdef bint bad
    with nogil:
        for bi in range(B):
            for i in range(KL):
                X[bi, 0, i] = x0[bi, i]
            n = nsteps[bi]
            last = S
            for s in range(n):
                hs = h[bi, s]
                _rhs(G[bi], b[bi], &X[bi, s, 0], k1, L, KL)
                for i in range(KL):
                    y[i] = X[bi, s, i] + 0.5 * hs * k1[i]
                _rhs(G[bi], b[bi], y, k2, L, KL)
                for i in range(KL):
                    y[i] = X[bi, s, i] + 0.5 * hs * k2[i]
                _rhs(G[bi], b[bi], y, k3, L, KL)
                for i in range(KL):
                    y[i] = X[bi, s, i] + hs * k3[i]
                _rhs(G[bi], b[bi], y, k4, L, KL)
                bad = False
                for i in range(KL):
                    v = X[bi, s, i] + hs / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                    if not (fabs(v) <= guard):
                        bad = True
                        # same clipping as the NumPy kernel: NaN -> 0
                        if v != v:
                            v = 0.0
                        elif v > guard:
                            v = guard
                        else:
                            v = -guard
                    X[bi, s + 1, i] = v
                if bad:
                    valid[bi] = s
                    last = s + 1
                    break
            else:
                last = n
            # hold the final (or clipped) state over the padding
            for s in range(last + 1, S + 1):
                for i in range(KL):
                    X[bi, s, i] = X[bi, last, i]
    return X_arr, valid_arr


def backward(double[:, :, :] G, double[:, :] b, double[:, :, :] X, double[:, :] h,
             cnp.int64_t[:] valid, double[:, :, :] gX):
    cdef Py_ssize_t B = G.shape[0], L = G.shape[1], KL = G.shape[2]
    gG_arr = np.zeros((B, L, KL))
    gb_arr = np.zeros((B, L))
    gx0_arr = np.zeros((B, KL))
    cdef double[:, :, :] gG = gG_arr
    cdef double[:, :] gb = gb_arr
    cdef double[:, :] gx0 = gx0_arr
    work_arr = np.empty(13 * KL)
    cdef double[:] work = work_arr
    cdef double* k1 = &work[0]
    cdef double* k2 = &work[KL]
    cdef double* y2 = &work[2 * KL]
    cdef double* y3 = &work[3 * KL]
    cdef double* y4 = &work[4 * KL]
    cdef double* lam = &work[5 * KL]
    cdef double* g1 = &work[6 * KL]
    cdef double* g2 = &work[7 * KL]
    cdef double* g3 = &work[8 * KL]
    cdef double* g4 = &work[9 * KL]
    cdef double* xbar = &work[10 * KL]
    cdef double* ybar = &work[11 * KL]
    cdef double* x
    cdef Py_ssize_t bi, s, i, j, n
    cdef double hs
    with nogil:
        for bi in range(B):
            n = valid[bi]
            for i in range(KL):
                lam[i] = 0.0
            for s in range(n - 1, -1, -1):
                for i in range(KL):
                    lam[i] += gX[bi, s + 1, i]
                hs = h[bi, s]
                x = &X[bi, s, 0]
                _rhs(G[bi], b[bi], x, k1, L, KL)
                for i in range(KL):
                    y2[i] = x[i] + 0.5 * hs * k1[i]
                _rhs(G[bi], b[bi], y2, k2, L, KL)
                for i in range(KL):
                    y3[i] = x[i] + 0.5 * hs * k2[i]
                _rhs(G[bi], b[bi], y3, k1, L, KL)
                for i in range(KL):
                    y4[i] = x[i] + hs * k1[i]
                for i in range(KL):
                    g4[i] = hs / 6.0 * lam[i]
                    g3[i] = hs / 3.0 * lam[i]
                    g2[i] = hs / 3.0 * lam[i]
                    g1[i] = hs / 6.0 * lam[i]
                    xbar[i] = lam[i]
                # stage 4
                for i in range(L):
                    gb[bi, i] += g4[KL - L + i]
                    for j in range(KL):
                        gG[bi, i, j] += g4[KL - L + i] * y4[j]
                for i in range(KL):
                    ybar[i] = 0.0
                _rhs_t(G[bi], g4, ybar, L, KL)
                for i in range(KL):
                    xbar[i] += ybar[i]
                    g3[i] += hs * ybar[i]
                # stage 3
                for i in range(L):
                    gb[bi, i] += g3[KL - L + i]
                    for j in range(KL):
                        gG[bi, i, j] += g3[KL - L + i] * y3[j]
                for i in range(KL):
                    ybar[i] = 0.0
                _rhs_t(G[bi], g3, ybar, L, KL)
                for i in range(KL):
                    xbar[i] += ybar[i]
                    g2[i] += 0.5 * hs * ybar[i]
                # stage 2
                for i in range(L):
                    gb[bi, i] += g2[KL - L + i]
                    for j in range(KL):
                        gG[bi, i, j] += g2[KL - L + i] * y2[j]
                for i in range(KL):
                    ybar[i] = 0.0
                _rhs_t(G[bi], g2, ybar, L, KL)
                for i in range(KL):
                    xbar[i] += ybar[i]
                    g1[i] += 0.5 * hs * ybar[i]
                # stage 1
                for i in range(L):
                    gb[bi, i] += g1[KL - L + i]
                    for j in range(KL):
                        gG[bi, i, j] += g1[KL - L + i] * x[j]
                _rhs_t(G[bi], g1, xbar, L, KL)
                for i in range(KL):
                    lam[i] = xbar[i]
            for i in range(KL):
                gx0[bi, i] = lam[i] + gX[bi, 0, i]
    return gG_arr, gb_arr, gx0_arr
