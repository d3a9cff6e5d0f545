import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horom import autodiff as ad
from horom.errors import DivergenceError, InvalidArgumentError, ShapeError
from horom.kernels import BACKENDS, rk4_backward, rk4_forward
from horom.latent import (LatentCoefficients, LatentState, estimate_top_derivative, integrate_batch,
                          integrate_on_grid, rhs, rk4_integrate)
from horom.stencils import differentiate_series


def oscillator():
    return LatentCoefficients([-np.eye(1), np.zeros((1, 1))], np.zeros(1))


def test_rhs_examples():
    zero = LatentCoefficients.zeros(2, 3)
    assert np.all(rhs(zero, LatentState([np.ones(3), np.ones(3)])) == 0)
    drift = LatentCoefficients([np.zeros((2, 2))], np.array([0.5, -1.0]))
    np.testing.assert_array_equal(rhs(drift, LatentState([np.array([7.0, 8.0])])), [0.5, -1.0])
    osc = LatentCoefficients([-np.eye(2), np.zeros((2, 2))], np.zeros(2))
    z = np.array([0.3, -0.4])
    np.testing.assert_array_equal(rhs(osc, LatentState([z, np.ones(2)])), -z)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 3), L=st.integers(1, 4))
def test_rhs_is_affine_in_state(seed, K, L):
    rng = np.random.default_rng(seed)
    c = LatentCoefficients([rng.normal(size=(L, L)) for _ in range(K)], rng.normal(size=L))
    s1 = LatentState([rng.normal(size=L) for _ in range(K)])
    s2 = LatentState([rng.normal(size=L) for _ in range(K)])
    s12 = LatentState([a + b for a, b in zip(s1.derivatives, s2.derivatives)])
    resid = rhs(c, s12) - rhs(c, s1) - rhs(c, s2) + c.b
    np.testing.assert_allclose(resid, 0.0, atol=1e-12)


def test_coefficient_matrix_round_trip():
    rng = np.random.default_rng(0)
    c = LatentCoefficients([rng.normal(size=(3, 3)) for _ in range(2)], rng.normal(size=3))
    M = c.to_matrix()
    assert M.shape == (3, 7)
    back = LatentCoefficients.from_matrix(M, 2)
    np.testing.assert_array_equal(back.to_matrix(), M)
    with pytest.raises(ShapeError):
        LatentCoefficients.from_matrix(M, 3)


def test_exponential_decay():
    c = LatentCoefficients([-np.eye(1)], np.zeros(1))
    traj = rk4_integrate(c, LatentState([np.ones(1)]), 0.0, 1.0, 100)
    assert abs(traj.states[-1, 0, 0] - math.exp(-1)) < 1e-8
    assert traj.states.shape == (101, 1, 1)


def test_oscillator_quarter_period():
    traj = rk4_integrate(oscillator(), LatentState([np.ones(1), np.zeros(1)]), 0.0, math.pi / 2, 200)
    z, zdot = traj.states[-1, :, 0]
    assert abs(z) < 1e-6 and abs(zdot + 1) < 1e-6


def test_zero_duration_is_identity():
    s = LatentState([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    traj = rk4_integrate(LatentCoefficients.zeros(2, 2), s, 0.5, 0.5, 3)
    for row in traj.states:
        np.testing.assert_array_equal(row.ravel(), s.stacked())


def test_rk4_integrate_argument_errors():
    c, s = oscillator(), LatentState([np.ones(1), np.zeros(1)])
    with pytest.raises(InvalidArgumentError):
        rk4_integrate(c, s, 1.0, 0.0, 10)
    with pytest.raises(InvalidArgumentError):
        rk4_integrate(c, s, 0.0, 1.0, 0)


def test_divergence_raises_with_step():
    c = LatentCoefficients([np.array([[50.0]])], np.zeros(1))
    with pytest.raises(DivergenceError) as info:
        rk4_integrate(c, LatentState([np.ones(1)]), 0.0, 1.0, 10)
    assert info.value.step is not None and info.value.step < 10


def test_endpoint_error_is_fourth_order():
    rng = np.random.default_rng(1)
    L = 2
    c = LatentCoefficients([rng.normal(scale=0.5, size=(L, L)) - np.eye(L), rng.normal(scale=0.2, size=(L, L))],
                           rng.normal(size=L))
    s = LatentState([rng.normal(size=L), rng.normal(size=L)])
    exact = rk4_integrate(c, s, 0.0, 1.0, 4096).states[-1]
    errs = [np.max(np.abs(rk4_integrate(c, s, 0.0, 1.0, n).states[-1] - exact)) for n in (16, 32)]
    assert math.log2(errs[0] / errs[1]) > 3.7


def test_dense_trajectory_components_are_derivatives():
    rng = np.random.default_rng(5)
    c = LatentCoefficients([-np.eye(2) + 0.1 * rng.normal(size=(2, 2)), 0.1 * rng.normal(size=(2, 2))],
                           rng.normal(size=2))
    traj = rk4_integrate(c, LatentState([rng.normal(size=2), rng.normal(size=2)]), 0.0, 2.0, 400)
    dz = differentiate_series(traj.times, traj.derivative(0), 1).values
    np.testing.assert_allclose(dz, traj.derivative(1), atol=1e-3)


def test_integrate_on_grid_nonuniform_matches_exponential():
    t = np.cumsum(np.concatenate([[0.0], np.random.default_rng(2).uniform(0.005, 0.015, 100)]))
    c = LatentCoefficients([-np.eye(1)], np.zeros(1))
    traj = integrate_on_grid(c, LatentState([np.ones(1)]), t)
    np.testing.assert_allclose(traj.states[:, 0, 0], np.exp(-t), rtol=1e-8)


def random_batch(seed, B=5, S=7, L=2, K=2):
    rng = np.random.default_rng(seed)
    G = rng.normal(scale=0.5, size=(B, L, K * L))
    b = rng.normal(size=(B, L))
    x0 = rng.normal(size=(B, K * L))
    nsteps = rng.integers(0, S + 1, size=B).astype(np.int64)
    h = np.zeros((B, S))
    for i, n in enumerate(nsteps):
        h[i, :n] = rng.uniform(0.01, 0.1, size=n)
    return G, b, x0, h, nsteps


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_backends_agree(seed):
    G, b, x0, h, nsteps = random_batch(seed)
    Xn, vn = rk4_forward(G, b, x0, h, nsteps, 1e6, backend="numpy")
    Xc, vc = rk4_forward(G, b, x0, h, nsteps, 1e6, backend="compiled")
    np.testing.assert_array_equal(vn, vc)
    np.testing.assert_allclose(Xc, Xn, rtol=1e-13, atol=1e-13)
    gX = np.random.default_rng(seed + 1).normal(size=Xn.shape)
    for a, c in zip(rk4_backward(G, b, Xn, h, vn, gX, backend="numpy"),
                    rk4_backward(G, b, Xc, h, vc, gX, backend="compiled")):
        np.testing.assert_allclose(c, a, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_backends_clamp_identically(backend):
    G = np.array([[[40.0]], [[0.1]]])
    b = np.zeros((2, 1))
    x0 = np.array([[1.0], [np.nan]])
    h = np.full((2, 6), 0.1)
    X, valid = rk4_forward(G, b, x0, h, np.array([6, 6]), 1e3, backend=backend)
    assert valid[0] < 6 and np.all(np.abs(X[0]) <= 1e3)
    assert np.all(X[0, valid[0] + 1:] == X[0, valid[0] + 1])
    assert valid[1] == 0 and np.all(X[1, 1:] == 0.0)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_padding_holds_last_state(backend):
    G, b, x0, h, nsteps = random_batch(3)
    X, valid = rk4_forward(G, b, x0, h, nsteps, 1e6, backend=backend)
    np.testing.assert_array_equal(valid, nsteps)
    for i, n in enumerate(nsteps):
        np.testing.assert_array_equal(X[i, n:], np.broadcast_to(X[i, n], X[i, n:].shape))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_adjoint_matches_finite_differences(seed):
    G, b, x0, h, nsteps = random_batch(seed, B=3, S=5)
    rng = np.random.default_rng(seed + 7)
    w = rng.normal(size=(3, 6, 4))
    for i, n in enumerate(nsteps):
        w[i, n + 1:] = 0.0  # padding rows only repeat the endpoint

    def f(Gv, bv, xv):
        X, _ = integrate_batch(Gv, bv, xv, h, nsteps)
        return ad.tsum(X * w)

    leaves = [ad.Tensor(a, requires_grad=True) for a in (G, b, x0)]
    grads = ad.gradients(f(*leaves), leaves)
    eps = 1e-6
    for which, (arr, g) in enumerate(zip((G, b, x0), grads)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            args_p = [a.copy() for a in (G, b, x0)]
            args_m = [a.copy() for a in (G, b, x0)]
            args_p[which][idx] += eps
            args_m[which][idx] -= eps
            fd[idx] = (float(f(*args_p).value) - float(f(*args_m).value)) / (2 * eps)
        assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


def test_endpoint_gradient_wrt_stiffness():
    # d z(T)/d C0 for z'' = C0 z at C0 = -1, z(0)=1, z'(0)=0, T = pi/2:
    # z = cos(sqrt(-C0) t) gives dz/dC0 = T sin(T) / 2 = pi/4
    T, n = math.pi / 2, 200
    G = ad.Tensor(np.array([[[-1.0, 0.0]]]), requires_grad=True)
    X, _ = integrate_batch(G, np.zeros((1, 1)), np.array([[1.0, 0.0]]), np.full((1, n), T / n), [n])
    (gG,) = ad.gradients(ad.getitem(X, (0, n, 0)), [G])
    assert gG[0, 0, 0] == pytest.approx(math.pi / 4, rel=1e-6)


def test_integrate_batch_shape_checks():
    G, b, x0, h, nsteps = random_batch(0)
    with pytest.raises(ShapeError):
        integrate_batch(G, b[:, :1], x0, h, nsteps)
    with pytest.raises(InvalidArgumentError):
        integrate_batch(G, b, x0, h, nsteps + 100)


def test_integrate_batch_raise_mode_names_trajectory():
    G = np.array([[[0.0]], [[80.0]]])
    with pytest.raises(DivergenceError) as info:
        integrate_batch(G, np.zeros((2, 1)), np.ones((2, 1)), np.full((2, 10), 0.1), [10, 10], 1e3, "raise")
    assert info.value.context == {"trajectory": 1}


# ------------------------------------------------------- top derivative


def test_constant_encodings_give_zero_estimate():
    t = np.linspace(0, 1, 9)
    enc = [np.full((9, 2), 3.0), np.full((9, 2), -1.0)]
    np.testing.assert_allclose(estimate_top_derivative(enc, t, (0.5, 0.5)), 0.0, atol=1e-12)


def test_linear_top_series_gives_its_slope():
    t = np.linspace(0, 2, 11)
    v = np.array([0.7, -1.3])
    enc = [np.zeros((11, 2)), t[:, None] * v]
    np.testing.assert_allclose(estimate_top_derivative(enc, t, (1.0, 0.0)), np.broadcast_to(v, (11, 2)),
                               rtol=1e-12)


@pytest.mark.parametrize("weights", [(1.0, 0.0), (0.0, 1.0), (0.3, 0.7)])
def test_top_derivative_converges_at_second_order(weights):
    errs = []
    for n in (64, 128):
        t = np.linspace(0, 2 * math.pi, n)
        enc = [np.sin(t)[:, None], np.cos(t)[:, None]]
        errs.append(np.max(np.abs(estimate_top_derivative(enc, t, weights)[:, 0] + np.sin(t))))
    assert math.log2(errs[0] / errs[1]) >= 1.7


def test_top_derivative_weight_validation():
    t = np.linspace(0, 1, 6)
    with pytest.raises(InvalidArgumentError):
        estimate_top_derivative([t[:, None], t[:, None]], t, (0.7, 0.7))
    with pytest.raises(InvalidArgumentError):
        estimate_top_derivative([t[:, None]], t, (0.5, 0.5))
