import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from echoscape import tensor as T

EPS = 1e-6
PRIMITIVE_TOL = 1e-6


def _param(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def _projected(y, seed=1):
    # random projection gives every output element an O(1) gradient
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return (y * T.Tensor(w)).sum()


def _primitive_cases():
    rng = np.random.default_rng(0)
    x = _param(rng, 2, 3, 7, 6)
    w = _param(rng, 4, 3, 3, 2)
    b = _param(rng, 4)
    wt = _param(rng, 3, 5, 4, 3)
    bt = _param(rng, 5)
    a = _param(rng, 2, 5, 4)
    m = _param(rng, 4, 3)
    g = _param(rng, 4)
    be = _param(rng, 4)
    # keep relu inputs away from the kink
    r = T.Tensor(np.sign(a.data) * (np.abs(a.data) + 0.1), requires_grad=True)
    st_ = T.BatchNormState(4, dtype=np.float64)
    st_eval = T.BatchNormState(4, dtype=np.float64)
    st_eval.running_mean[:] = rng.standard_normal(4)
    st_eval.running_var[:] = rng.uniform(0.5, 2.0, 4)
    return {
        "conv2d_x_stride2": (lambda t: _projected(T.conv2d(t, w, b, stride=2)), x),
        "conv2d_w": (lambda t: _projected(T.conv2d(x, t, b)), w),
        "conv2d_b": (lambda t: _projected(T.conv2d(x, w, t)), b),
        "conv2d_valid": (lambda t: _projected(T.conv2d(t, w, None, padding="valid")), x),
        "conv_transpose2d_x": (lambda t: _projected(T.conv_transpose2d(t, wt, bt, stride=2)), x),
        "conv_transpose2d_w": (lambda t: _projected(T.conv_transpose2d(x, t, bt, stride=2)), wt),
        "conv_transpose2d_b": (lambda t: _projected(T.conv_transpose2d(x, wt, t, stride=2)), bt),
        "matmul_a": (lambda t: _projected(t @ m), a),
        "matmul_b": (lambda t: _projected(a @ t), m),
        "add_broadcast": (lambda t: _projected(a + t), g),
        "mul": (lambda t: _projected(t * a), a),
        "sub": (lambda t: _projected(a - t * 2.0), a),
        "relu": (lambda t: _projected(T.relu(t)), r),
        "softmax": (lambda t: _projected(T.softmax(t)), a),
        "layer_norm_x": (lambda t: _projected(T.layer_norm(t, g, be)), a),
        "layer_norm_gamma": (lambda t: _projected(T.layer_norm(a, t, be)), g),
        "layer_norm_beta": (lambda t: _projected(T.layer_norm(a, g, t)), be),
        "batch_norm_train_x": (lambda t: _projected(T.batch_norm(t, g, be, st_, training=True)), a),
        "batch_norm_train_gamma": (lambda t: _projected(T.batch_norm(a, t, be, st_, training=True)), g),
        "batch_norm_eval_x": (lambda t: _projected(T.batch_norm(t, g, be, st_eval, training=False)), a),
        "concat": (lambda t: _projected(T.concat([t, x * 2.0], axis=1)), x),
        "reshape_transpose": (lambda t: _projected(t.transpose(0, 2, 1).reshape(2, 20)), a),
        "slice": (lambda t: _projected(t[:, 1:3]), a),
        "mean_sq_error": (lambda t: T.mean_sq_error(t, T.Tensor(np.ones(a.shape))), a),
        "sum_axis": (lambda t: _projected(t.sum(axis=1)), a),
        "mean": (lambda t: t.mean() * 3.0, a),
        "resize_bilinear": (lambda t: _projected(T.resize_bilinear(t, 5, 3)), x),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_gradients(name):
    f, x = _primitive_cases()[name]
    err = T.grad_check(f, x, eps=EPS, n_coords=60)
    assert err < PRIMITIVE_TOL, f"{name}: {err}"


def test_linear_function_exact():
    x = T.Tensor(np.random.default_rng(2).standard_normal((4, 5)), requires_grad=True)
    c = T.Tensor(np.random.default_rng(3).standard_normal((4, 5)))
    assert T.grad_check(lambda t: (t * c).sum(), x) < 1e-10


def test_identity_matmul():
    X = np.random.default_rng(4).standard_normal((5, 3))
    assert np.array_equal((T.Tensor(np.eye(5)) @ T.Tensor(X)).data, X)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(a):
    s = T.softmax(T.Tensor(a)).data
    assert np.allclose(s.sum(axis=-1), 1.0)
    assert np.all(s >= 0)


def test_square_derivative():
    x = T.Tensor(np.array([3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad[0] == 6.0


def test_sum_gives_ones():
    w = T.Tensor(np.zeros((3, 2)), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones((3, 2)))


def test_detached_gets_zero_grad():
    w = T.Tensor(np.ones(3), requires_grad=True)
    v = T.Tensor(np.ones(3), requires_grad=True)
    (v * 2.0).sum().backward()
    assert np.array_equal(w.grad, np.zeros(3))


def test_shared_subexpression_accumulates():
    x = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    (x + x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        (x * 2.0).backward()


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(T.ShapeError):
        T.Tensor(np.zeros((2, 3))) @ T.Tensor(np.zeros((4, 2)))


def test_conv_same_padding_shapes():
    x = T.Tensor(np.zeros((2, 3, 9, 7)))
    assert T.conv2d(x, T.Tensor(np.zeros((4, 3, 5, 3)))).shape == (2, 4, 9, 7)
    assert T.conv2d(x, T.Tensor(np.zeros((4, 3, 5, 3))), stride=2).shape == (2, 4, 5, 4)
    assert T.conv_transpose2d(x, T.Tensor(np.zeros((3, 2, 4, 4))), stride=2).shape == (2, 2, 18, 14)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    assert np.allclose(out, ref)


def test_conv_transpose_is_conv_adjoint():
    # <conv(x), y> == <x, conv_transpose(y)> when the transposed layer uses the same weights
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 8, 6))
    w = rng.standard_normal((3, 2, 4, 4))
    y = rng.standard_normal((1, 3, 4, 3))
    cx = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=(1, 1)).data
    ty = T.conv_transpose2d(T.Tensor(y), T.Tensor(w), stride=2, padding=1).data
    assert np.sum(cx * y) == pytest.approx(np.sum(x * ty), rel=1e-10)


def test_batch_norm_running_stats_and_eval():
    rng = np.random.default_rng(7)
    st_ = T.BatchNormState(3, momentum=1.0, dtype=np.float64)
    x = rng.standard_normal((50, 3)) * 2 + 1
    g, b = T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))
    T.batch_norm(T.Tensor(x), g, b, st_, training=True)
    assert np.allclose(st_.running_mean, x.mean(0))
    assert np.allclose(st_.running_var, x.var(0, ddof=1))
    y = T.batch_norm(T.Tensor(x), g, b, st_, training=False).data
    assert np.allclose(y, (x - x.mean(0)) / np.sqrt(x.var(0, ddof=1) + st_.eps))


def test_forward_deterministic():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 2, 16, 8))
    w = rng.standard_normal((4, 2, 3, 3))
    a = T.conv2d(T.Tensor(x), T.Tensor(w)).data
    b = T.conv2d(T.Tensor(x), T.Tensor(w)).data
    assert np.array_equal(a, b)


def test_resize_identity_when_same_size():
    x = np.random.default_rng(9).standard_normal((1, 1, 4, 5))
    assert np.allclose(T.resize_bilinear(T.Tensor(x), 4, 5).data, x)


def test_grad_check_atol_only_forgives_tiny_derivatives():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    # a 1e-12 derivative is below the quotient's rounding floor
    f = lambda t: (t * T.Tensor(np.array([1e-12, 1e-3]))).sum() + 10.0
    assert T.grad_check(f, x) > 1e-6
    assert T.grad_check(f, x, atol=1e-9) < 1e-6
    # a real mismatch (one-sided slope at the ReLU kink) is still reported
    kink = T.Tensor(np.array([1.0]), requires_grad=True)
    assert T.grad_check(lambda t: T.relu(t - 1.0).sum(), kink, eps=1e-3, atol=1e-9) > 0.1


def test_grad_check_rejects_constant():
    with pytest.raises(ValueError):
        T.grad_check(lambda t: t.sum(), T.Tensor(np.ones(2)))


def test_numerical_grad_matches_analytic():
    x = T.Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
    f = lambda t: (t * t * t).sum()     # noqa: E731
    assert np.allclose(T.numerical_grad(f, x), 3 * x.data ** 2, atol=1e-6)
