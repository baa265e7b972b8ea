"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Each differentiable operation returns a :class:`Tensor` that records its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks that tape in reverse topological order.
Only leaf tensors created with ``requires_grad=True`` keep a ``.grad``.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None,
                 _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._op = _op
        self._parents = _parents
        self._backward = _backward
        self.grad = np.zeros_like(arr) if (self.requires_grad and _backward is None) else None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    # -- reverse pass ----------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is not None:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def _lift(a, b):
    """Promote python scalars / arrays to tensors of the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward if req else None, _op=op)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _lift(a, b)
    _check_broadcast("add", a, b)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _lift(a, b)
    _check_broadcast("sub", a, b)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _lift(a, b)
    _check_broadcast("mul", a, b)

    def back(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data * b.data, (a, b), back, "mul")


def relu(x):
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(out, (x,), back, "sum")


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def mean_sq_error(pred, target):
    """Mean over all elements of (pred - target)^2."""
    pred, target = _lift(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mean_sq_error: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def back(g):
        k = (2.0 / n) * g
        return (k * diff if pred.requires_grad else None,
                -k * diff if target.requires_grad else None)
    return _make(out, (pred, target), back, "mse")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _make(out, (a, b), back, "matmul")


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx):
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(out, (x,), back, "slice")


slice_ = getitem


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes "
                             f"{[tt.shape for tt in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, back, "concat")


# -- normalisation and attention helpers ---------------------------------

def softmax(x):
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)
    return _make(y, (x,), back, "softmax")


def _norm_backward(g, xhat, inv_std, axes, count, gamma):
    gx = g * gamma
    m1 = gx.sum(axis=axes, keepdims=True) / count
    m2 = (gx * xhat).sum(axis=axes, keepdims=True) / count
    return inv_std * (gx - m1 - xhat * m2)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis with a learned per-feature affine map."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def back(g):
        gx = _norm_backward(g, xhat, inv_std, -1, x.shape[-1], gamma.data) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), back, "layer_norm")


class BatchNormState:
    """Running statistics of a batch-norm layer (not learnable)."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training=False, axis=-1):
    """Per-feature normalisation over every axis except ``axis``."""
    ax = axis % x.ndim
    C = x.shape[ax]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta {gamma.shape} vs {C} features")
    red = tuple(i for i in range(x.ndim) if i != ax)
    bshape = [1] * x.ndim
    bshape[ax] = C
    count = x.data.size // C
    if training:
        mu = x.data.mean(axis=red, keepdims=True)
        var = x.data.var(axis=red, keepdims=True)
        m = state.momentum
        unbiased = var.reshape(C) * (count / max(count - 1, 1))
        state.running_mean = ((1 - m) * state.running_mean + m * mu.reshape(C)).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.reshape(bshape).astype(x.dtype)
        var = state.running_var.reshape(bshape).astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    g_b = gamma.data.reshape(bshape)
    out = xhat * g_b + beta.data.reshape(bshape)

    def back(g):
        gx = None
        if x.requires_grad:
            if training:
                gx = _norm_backward(g, xhat, inv_std, red, count, g_b)
            else:
                gx = g * g_b * inv_std
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), back, "batch_norm")


# -- convolutions -------------------------------------------------------------

def _same_pads(size, k, s):
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def conv_pads(hw, khw, stride, padding):
    (H, W), (kh, kw) = hw, khw
    if padding == "same":
        return _same_pads(H, kh, stride) + _same_pads(W, kw, stride)
    if padding == "valid":
        return (0, 0, 0, 0)
    if isinstance(padding, int):
        return (padding,) * 4
    ph, pw = padding
    return (ph, ph, pw, pw)


_CHUNK_BYTES = 4 << 20


def _chunks(n, per_sample_bytes):
    """Sample ranges whose im2col buffers stay cache-sized."""
    step = max(1, min(n, _CHUNK_BYTES // max(per_sample_bytes, 1)))
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def conv2d(x, w, b=None, stride=1, padding="same"):
    """x: (N, C, H, W); w: (Cout, C, kh, kw); b: (Cout,) or None.

    Column buffers are built per cache-sized chunk of samples and rebuilt
    in the backward pass rather than kept alive.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weights {w.shape}")
    N, C, H, W = x.shape
    Cout, _, kh, kw = w.shape
    pads = conv_pads((H, W), (kh, kw), stride, padding)
    Ho = (H + pads[0] + pads[1] - kh) // stride + 1
    Wo = (W + pads[2] + pads[3] - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    L = Ho * Wo
    wm = w.data.reshape(Cout, -1)
    spans = _chunks(N, C * kh * kw * L * x.data.itemsize)
    out = np.empty((N, Cout, L), dtype=np.result_type(x.dtype, w.dtype))
    for i0, i1 in spans:
        cols = kernels.im2col(x.data[i0:i1], kh, kw, stride, pads)
        for j in range(i1 - i0):
            np.matmul(wm, cols[j], out=out[i0 + j])
    if b is not None:
        out += b.data.reshape(1, Cout, 1)
    out = out.reshape(N, Cout, Ho, Wo)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = np.ascontiguousarray(g).reshape(N, Cout, L)
        gx = np.empty(x.shape, dtype=g.dtype) if x.requires_grad else None
        gw = np.zeros_like(wm) if w.requires_grad else None
        for i0, i1 in spans:
            if gw is not None:
                cols = kernels.im2col(x.data[i0:i1], kh, kw, stride, pads)
                for j in range(i1 - i0):
                    gw += g2[i0 + j] @ cols[j].T
            if gx is not None:
                dcols = np.matmul(wm.T, g2[i0:i1])
                gx[i0:i1] = kernels.col2im(dcols, (C, H, W), kh, kw, stride, pads)
        if gw is not None:
            gw = gw.reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))
    return _make(out, parents, back, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, padding="same"):
    """Gradient-of-conv upsampling. x: (N, Cin, H, W); w: (Cin, Cout, kh, kw).

    ``padding="same"`` gives an output of exactly (H*stride, W*stride);
    an integer crops that many rows/cols from each border of the full output.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weights {w.shape}")
    N, Cin, H, W = x.shape
    _, Cout, kh, kw = w.shape
    if padding == "same":
        if kh < stride or kw < stride:
            raise ShapeError("conv_transpose2d 'same' needs kernel >= stride")
        ch, cw = kh - stride, kw - stride
        pads = (ch // 2, ch - ch // 2, cw // 2, cw - cw // 2)
    else:
        p = padding if isinstance(padding, int) else 0
        pads = (p, p, p, p)
    Ho = (H - 1) * stride + kh - pads[0] - pads[1]
    Wo = (W - 1) * stride + kw - pads[2] - pads[3]
    wm = w.data.reshape(Cin, Cout * kh * kw)
    xr = x.data.reshape(N, Cin, H * W)
    spans = _chunks(N, Cout * kh * kw * H * W * x.data.itemsize)
    out = np.empty((N, Cout, Ho, Wo), dtype=np.result_type(x.dtype, w.dtype))
    for i0, i1 in spans:
        out[i0:i1] = kernels.col2im(np.matmul(wm.T, xr[i0:i1]), (Cout, Ho, Wo),
                                    kh, kw, stride, pads)
    if b is not None:
        out += b.data.reshape(1, Cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g = np.ascontiguousarray(g)
        gx = np.empty((N, Cin, H * W), dtype=g.dtype) if x.requires_grad else None
        gw = np.zeros_like(wm) if w.requires_grad else None
        for i0, i1 in spans:
            gcols = kernels.im2col(g[i0:i1], kh, kw, stride, pads)
            for j in range(i1 - i0):
                if gx is not None:
                    np.matmul(wm, gcols[j], out=gx[i0 + j])
                if gw is not None:
                    gw += xr[i0 + j] @ gcols[j].T
        if gx is not None:
            gx = gx.reshape(x.shape)
        if gw is not None:
            gw = gw.reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return _make(out, parents, back, "conv_transpose2d")


def bilinear_matrix(n_out, n_in, dtype=np.float64):
    """Half-pixel-centred linear interpolation matrix (n_out x n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    f = src - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - f)
    np.add.at(m, (np.arange(n_out), hi), f)
    return m


def resize_bilinear(x, out_h, out_w):
    """Resize the last two axes with separable bilinear interpolation."""
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    ry = Tensor(bilinear_matrix(out_h, H, x.dtype))
    rx_t = Tensor(bilinear_matrix(out_w, W, x.dtype).T.copy())
    return matmul(matmul(ry, x), rx_t)


# -- gradient checking ------------------------------------------------------

def grad_check(f, x: Tensor, eps=1e-5, n_coords=50, rng=None, atol=0.0):
    """Max relative error between backprop and central differences.

    ``f`` maps the tensor ``x`` to a scalar tensor. At most ``n_coords``
    coordinates (all, if fewer) are probed; the relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8). Coordinates where both
    derivatives are within ``atol`` of zero count as exact; set it just above
    the rounding floor of the difference quotient, about 1e-16 * |f| / eps.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    x.zero_grad()
    f(x).backward()
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    n = flat.size
    idx = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        a = float(analytic.reshape(-1)[i])
        if max(abs(a), abs(num)) <= atol:
            continue
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


def numerical_grad(f, x: Tensor, eps=1e-5):
    """Full central-difference gradient (for small tensors in tests)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
