import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from echoscape import _kernels_py as py
from echoscape import kernels

cy = pytest.importorskip("echoscape._kernels", reason="compiled extension not built")


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@given(seed=st.integers(0, 10_000), fill=st.floats(-1, 1))
def test_bilinear_backends_agree(seed, fill):
    rng = np.random.default_rng(seed)
    img = rng.random((9, 7))
    rows = rng.uniform(-2, 11, (5, 6))
    cols = rng.uniform(-2, 9, (5, 6))
    assert np.allclose(cy.bilinear_sample(img, rows, cols, fill),
                       py.bilinear_sample(img, rows, cols, fill), rtol=0, atol=1e-12)


def test_bilinear_integer_points_exact():
    img = np.arange(12.0).reshape(3, 4)
    r, c = np.meshgrid(np.arange(3.0), np.arange(4.0), indexing="ij")
    assert np.array_equal(kernels.bilinear_sample(img, r, c), img)
    assert kernels.bilinear_sample(img, np.array([[0.5]]), np.array([[0.5]]))[0, 0] == 2.5
    assert kernels.bilinear_sample(img, np.array([[-1.0]]), np.array([[0.0]]), 7.0)[0, 0] == 7.0


@given(seed=st.integers(0, 10_000), kh=st.integers(1, 4), kw=st.integers(1, 4),
       stride=st.integers(1, 2), pad=st.integers(0, 2),
       dtype=st.sampled_from([np.float32, np.float64]))
def test_im2col_col2im_backends_agree(seed, kh, kw, stride, pad, dtype):
    rng = np.random.default_rng(seed)
    x = rng.random((2, 3, 8, 6)).astype(dtype)
    pads = (pad, pad + 1, pad, pad) if pad else (0, 0, 0, 0)
    a = cy.im2col(x, kh, kw, stride, *pads)
    b = py.im2col(x, kh, kw, stride, *pads)
    assert a.shape == b.shape and a.dtype == b.dtype
    assert np.array_equal(a, b)
    back_c = cy.col2im(a, 3, 8, 6, kh, kw, stride, *pads)
    back_p = py.col2im(b, 3, 8, 6, kh, kw, stride, *pads)
    assert np.allclose(back_c, back_p, atol=1e-5 if dtype == np.float32 else 1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.random((1, 2, 7, 5))
    pads = (1, 1, 2, 0)
    cols = kernels.im2col(x, 3, 2, 2, pads)
    y = rng.random(cols.shape)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x[0] * kernels.col2im(y, (2, 7, 5), 3, 2, 2, pads)[0]))
    assert lhs == pytest.approx(rhs, rel=1e-12)
