import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horom import autodiff as ad
from horom.autoencoder import init_stack, mlp_apply
from horom.errors import NonFiniteGradientError, ShapeError


def central_diff(f, x, eps=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def grad_of(fn, *arrays):
    _, rec = ad.record_forward(fn, *arrays)
    return ad.backward(rec)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


# weighted sums keep every primitive's output scalar and sensitive to all entries
PRIMITIVES = {
    "add": lambda x, y: ad.tsum(ad.sin(x + y)),
    "sub": lambda x, y: ad.tsum(ad.sin(x - y)),
    "mul": lambda x, y: ad.tsum(x * y * x),
    "matmul": lambda x, y: ad.tsum(ad.sin(ad.matmul(x, ad.transpose(y)))),
    "affine": lambda x, y: ad.tsum(ad.sin(ad.affine(x, ad.transpose(y), ad.getitem(y, (0, slice(0, 3)))))),
    "sin": lambda x, y: ad.tsum(ad.sin(x) * y),
    "cos": lambda x, y: ad.tsum(ad.cos(x) * y),
    "abs": lambda x, y: ad.tsum(ad.tabs(x + 0.05) * y),
    "square": lambda x, y: ad.tsum(ad.square(x) * y),
    "mean": lambda x, y: ad.mean(ad.sin(x * y), axis=0).sum(),
    "getitem": lambda x, y: ad.tsum(ad.sin(ad.getitem(x, [0, 2, 0])) * ad.getitem(y, [1, 1, 2])),
    "concat": lambda x, y: ad.tsum(ad.sin(ad.concat([x, y], axis=1))),
    "stack": lambda x, y: ad.tsum(ad.sin(ad.stack([x, y], axis=0)) * 1.3),
    "reshape": lambda x, y: ad.tsum(ad.sin(ad.reshape(x, (-1,))) * ad.reshape(y, (-1,))),
    "linear_apply": lambda x, y: ad.tsum(ad.sin(ad.linear_apply(np.arange(9.0).reshape(3, 3) / 7, x)) * y),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients_match_central_differences(name, seed):
    fn = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(3, 4))
    y = rng.uniform(-1, 1, size=(3, 4))
    gx, gy = grad_of(fn, x, y)
    fx = lambda v: float(fn(ad.Tensor(v), ad.Tensor(y)).value)
    fy = lambda v: float(fn(ad.Tensor(x), ad.Tensor(v)).value)
    assert rel_err(gx, central_diff(fx, x)) < 1e-5
    assert rel_err(gy, central_diff(fy, y)) < 1e-5


def test_weighted_row_penalty_gradient():
    rng = np.random.default_rng(7)
    pred, target = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    w = rng.uniform(0.5, 2.0, size=5)
    for kind in ("mae", "mse"):
        fn = lambda p: ad.weighted_row_penalty(p, target, w, kind)
        (g,) = grad_of(fn, pred)
        assert rel_err(g, central_diff(lambda v: float(fn(ad.Tensor(v)).value), pred)) < 1e-6
        d = pred - target
        expected = np.sum(w * (np.abs(d) if kind == "mae" else d * d).sum(axis=1))
        assert float(fn(ad.Tensor(pred)).value) == pytest.approx(expected, rel=1e-14)


def test_identity_matmul_returns_input():
    x = np.array([[1.5], [-2.0], [0.25]])
    value, _ = ad.record_forward(lambda v: ad.matmul(np.eye(3), v), x)
    np.testing.assert_array_equal(value, x)


def test_sin_at_zero_records_unit_derivative():
    value, rec = ad.record_forward(ad.sin, 0.0)
    assert value == 0.0
    assert ad.backward(rec)[0] == 1.0
    assert rec.ops() == ["leaf", "sin"]


def test_sum_gradient_is_ones():
    (g,) = grad_of(ad.tsum, np.arange(5.0))
    np.testing.assert_array_equal(g, np.ones(5))


def test_abs_subgradient():
    for x, expected in ((-2.0, -1.0), (0.0, 0.0), (3.0, 1.0)):
        (g,) = grad_of(ad.tabs, x)
        assert g == expected


def test_mlp_forward_matches_straight_line_evaluation():
    stack = init_stack("6-5-4-3", 1, seed=11)
    layers = stack.encoders[0]
    x = np.random.default_rng(0).normal(size=(7, 6))
    (W0, c0), (W1, c1), (W2, c2) = layers
    manual = np.sin(np.sin(x @ W0 + c0) @ W1 + c1) @ W2 + c2
    leaves = [(ad.Tensor(W, requires_grad=True), ad.Tensor(c, requires_grad=True)) for W, c in layers]
    out = mlp_apply(leaves, ad.Tensor(x))
    assert np.max(np.abs(out.value - manual)) <= 1e-14
    np.testing.assert_array_equal(mlp_apply(layers, x), manual)


def test_mlp_mae_gradient_matches_central_differences():
    stack = init_stack("5-4-3", 1, seed=3)
    x = np.random.default_rng(1).normal(size=(6, 5))
    target = np.random.default_rng(2).normal(size=(6, 3))
    W0 = stack.encoders[0][0][0]

    def loss(W):
        layers = [(W, stack.encoders[0][0][1]), stack.encoders[0][1]]
        return ad.mean(ad.tabs(mlp_apply(layers, ad.Tensor(x)) - target))

    (g,) = grad_of(loss, W0)
    assert rel_err(g, central_diff(lambda v: float(loss(ad.Tensor(v)).value), W0)) < 1e-5


def test_record_forward_is_pure():
    fn = lambda a, b: ad.tsum(ad.sin(ad.matmul(a, b)))
    a = np.random.default_rng(0).normal(size=(3, 3))
    v1, r1 = ad.record_forward(fn, a, a.T)
    v2, r2 = ad.record_forward(fn, a, a.T)
    assert v1 == v2
    g1, g2 = ad.backward(r1), ad.backward(r1)
    for x, y in zip(g1, g2):
        np.testing.assert_array_equal(x, y)


def test_non_scalar_output_needs_seed():
    _, rec = ad.record_forward(lambda x: ad.sin(x), np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(rec)
    (g,) = ad.backward(rec, seed=np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g, np.cos(1.0) * np.array([1.0, 2.0, 3.0]))


def test_broadcast_shape_errors():
    with pytest.raises(ShapeError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ad.affine(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))), ad.Tensor(np.ones(2)))


# ------------------------------------------------------------------ jvp


def test_jvp_of_affine_map_is_exact():
    rng = np.random.default_rng(4)
    W, c = rng.normal(size=(5, 3)), rng.normal(size=3)
    u, v = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
    _, tangent = ad.jvp(lambda x: ad.affine(x, W, c), u, v)
    np.testing.assert_allclose(tangent.value, v @ W, rtol=1e-15)


def test_jvp_zero_tangent():
    stack = init_stack("4-6-2", 1, seed=5)
    _, tangent = ad.jvp(lambda x: mlp_apply(stack.encoders[0], x), np.ones((1, 4)), np.zeros((1, 4)))
    np.testing.assert_array_equal(tangent.value, 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_jvp_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    stack = init_stack("6-8-8-3", 1, seed=seed % 1000)
    f = lambda x: mlp_apply(stack.encoders[0], x)
    u, v = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    _, tangent = ad.jvp(f, u, v)
    eps = 1e-6
    fd = (f(u + eps * v) - f(u - eps * v)) / (2 * eps)
    assert rel_err(tangent.value, fd) < 1e-5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_jvp_and_backward_agree(seed):
    rng = np.random.default_rng(seed)
    stack = init_stack("5-7-3", 1, seed=seed % 1000)
    f = lambda x: mlp_apply(stack.encoders[0], x)
    u, v, w = rng.normal(size=(1, 5)), rng.normal(size=(1, 5)), rng.normal(size=(1, 3))
    (grad,) = grad_of(lambda x: ad.tsum(f(x) * w), u)
    _, tangent = ad.jvp(f, u, v)
    lhs, rhs = float(np.sum(grad * v)), float(np.sum(w * tangent.value))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def test_jvp_is_differentiable_in_reverse_mode():
    # d/dW of <w, W^T v> is v w^T, independent of the point
    rng = np.random.default_rng(8)
    W = rng.normal(size=(4, 2))
    v, w = rng.normal(size=(1, 4)), rng.normal(size=(1, 2))

    def fn(Wt):
        _, tangent = ad.jvp(lambda x: ad.affine(x, Wt, np.zeros(2)), np.ones((1, 4)), v)
        return ad.tsum(tangent * w)

    (g,) = grad_of(fn, W)
    np.testing.assert_allclose(g, v.T @ w, rtol=1e-14)


def test_jvp_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.jvp(ad.sin, np.ones(3), np.ones(4))


# ----------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    state = ad.AdamState()
    ad.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert state.steps[0] == 1


def test_adam_first_step_is_lr_times_sign():
    p = np.zeros(4)
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    ad.adam_step([p], [g], ad.AdamState(lr=1e-3))
    np.testing.assert_allclose(p, -1e-3 * np.sign(g), atol=1e-6)


def test_adam_descends_quadratic_bowl():
    p = np.array([0.8, -0.5, 0.3])
    state = ad.AdamState(lr=1e-3)
    losses = []
    for _ in range(500):
        losses.append(float(np.sum(p * p)))
        ad.adam_step([p], [2 * p], state)
    assert all(b < a for a, b in zip(losses[10:], losses[11:]))


def test_adam_rejects_non_finite_before_touching_anything():
    p, q = np.ones(2), np.ones(2)
    with pytest.raises(NonFiniteGradientError):
        ad.adam_step([p, q], [np.ones(2), np.array([np.nan, 0.0])], ad.AdamState())
    np.testing.assert_array_equal(p, 1.0)


def test_adam_new_keys_start_fresh():
    state = ad.AdamState(lr=0.1)
    a, b = np.zeros(1), np.zeros(1)
    for _ in range(3):
        ad.adam_step([a], [np.ones(1)], state, keys=["a"])
    ad.adam_step([a, b], [np.ones(1), np.ones(1)], state, keys=["a", "b"])
    assert state.steps == {"a": 4, "b": 1}
    np.testing.assert_allclose(b, -0.1, atol=1e-6)
