"""Dense float64 tensors with reverse-mode gradients.

Every primitive builds the graph lazily: when no input requires gradients the
output is a plain value node and nothing is retained, so inference costs no
memory.  Backward walks the tape once, accumulating into Parameter.grad
(+=, cleared explicitly by zero_grads).  Each primitive checks its output for
NaN/Inf and raises NonFiniteValue naming the op.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import NonFiniteValue, ShapeMismatch, StgcnError

__all__ = [
    "Tensor", "Parameter", "tensor", "backward", "zero_grads", "grad_check",
    "matmul", "sparse_dense_matmul", "add", "scalar_mul", "concat",
    "slice_tensor", "conv1d_same", "sigmoid", "elementwise_mul", "layer_norm",
    "mean_over_axis", "abs_forward", "softmax", "dropout", "glu",
    "reshape", "transpose", "cross_entropy_with_logits",
    "cheb_conv", "cheb_conv_glu", "conv1d_glu", "layer_norm_dropout",
]


def _check_finite(arr, op):
    # cheap screen: a NaN/Inf anywhere makes the sum non-finite; the exact
    # scan only runs on the (rare) suspicious path
    if arr.size and not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NonFiniteValue(op)
    return arr


class Tensor:
    """Graph node holding a float64 ndarray."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        if self.data.dtype != np.float64:
            self.data = self.data.astype(np.float64)
        self.requires_grad = any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Learnable leaf with a persistent accumulating gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, f"parameter {name}")
        super().__init__(arr)
        self.requires_grad = True
        self.name = name
        self.grad = np.zeros_like(arr)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def tensor(data):
    """Constant leaf node (validated, contiguous)."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    _check_finite(arr, "tensor")
    return Tensor(arr)


def zero_grads(params):
    for p in params:
        p.grad[...] = 0.0


def backward(root: Tensor, release=False):
    """Reverse-mode sweep from a scalar root; accumulates into Parameter.grad.

    With release=True every non-leaf node is stripped (data, closure, parents)
    as soon as its vjp has run, so the step's working set shrinks during the
    sweep and buffers recycle; the graph is unusable afterwards.  Training
    uses this; leave it off if intermediate tensors are read after backward.
    """
    if root.data.size != 1:
        raise ShapeMismatch("backward requires a scalar root")
    if not root.requires_grad:
        return
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for par in node._parents:
            if par.requires_grad and id(par) not in visited:
                stack.append((par, False))
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._vjp is None:
            continue
        for par, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not par.requires_grad:
                continue
            held = grads.get(id(par))
            # non-inplace accumulate: the first stored grad may be a view
            grads[id(par)] = pg if held is None else held + pg
        if release:
            node.data = None
            node._vjp = None
            node._parents = ()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out = _check_finite(a.data @ b.data, "matmul")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), vjp)


def sparse_dense_matmul(S, x: Tensor) -> Tensor:
    """S @ x with S a constant sparse (or dense) matrix; only x gets a gradient."""
    if x.data.ndim != 2 or S.shape[1] != x.data.shape[0]:
        raise ShapeMismatch(f"sparse_dense_matmul {S.shape} @ {x.data.shape}")
    out = _check_finite(S @ x.data, "sparse_dense_matmul")
    ST = S.T

    def vjp(g):
        return (ST @ g,)

    return Tensor(out, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(f"add {a.data.shape} + {b.data.shape}") from e
    _check_finite(out, "add")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, (a, b), vjp)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _check_finite(x.data * c, "scalar_mul")

    def vjp(g):
        return (g * c,)

    return Tensor(out, (x,), vjp)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(f"elementwise_mul {a.data.shape} * {b.data.shape}") from e
    _check_finite(out, "elementwise_mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out, (a, b), vjp)


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    out = _check_finite(np.concatenate([p.data for p in parts], axis=axis), "concat")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(parts), vjp)


def slice_tensor(x: Tensor, key) -> Tensor:
    out = _check_finite(x.data[key], "slice")
    shape = x.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return Tensor(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor(out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    y = _check_finite(expit(x.data), "sigmoid")

    def vjp(g):
        return (g * (y * (1.0 - y)),)

    return Tensor(y, (x,), vjp)


def glu(x: Tensor, axis=-1) -> Tensor:
    """Gated linear unit: split x in halves along axis, a * sigmoid(b)."""
    h2 = x.data.shape[axis]
    if h2 % 2:
        raise ShapeMismatch(f"glu axis length {h2} is odd")
    h = h2 // 2
    sl_a = [slice(None)] * x.data.ndim
    sl_b = [slice(None)] * x.data.ndim
    ax = axis if axis >= 0 else x.data.ndim + axis
    sl_a[ax] = slice(0, h)
    sl_b[ax] = slice(h, None)
    sl_a, sl_b = tuple(sl_a), tuple(sl_b)
    s = expit(np.ascontiguousarray(x.data[sl_b]))
    out = x.data[sl_a] * s
    _check_finite(out, "glu")

    def vjp(g):
        # value half not retained: out = a*s, so the gate grad is g*out*(1-s)
        dz = np.empty_like(x.data)
        dz[sl_a] = g * s
        dz[sl_b] = (g * out) * (1.0 - s)
        return (dz,)

    return Tensor(out, (x,), vjp)


def conv1d_same(x: Tensor, kernel: Tensor, stride=1) -> Tensor:
    """1-D convolution (cross-correlation) along the middle axis, same padding.

    x: (M, N, C_in) with M a flattened batch, kernel: (kt, C_in, C_out).
    Output (M, N, C_out); kt must be odd so same padding is symmetric.
    out[:, t] = sum_k x[:, t + k - pad] @ kernel[k], computed tap by tap as
    shifted accumulations so no im2col buffer is materialized.
    """
    if stride != 1:
        raise StgcnError("conv1d_same supports stride=1 only")
    if x.data.ndim != 3 or kernel.data.ndim != 3 or x.data.shape[2] != kernel.data.shape[1]:
        raise ShapeMismatch(f"conv1d_same x{x.data.shape} kernel{kernel.data.shape}")
    kt = kernel.data.shape[0]
    if kt % 2 == 0:
        raise ShapeMismatch("conv1d_same kernel length must be odd")
    m, n_t, c_in = x.data.shape
    c_out = kernel.data.shape[2]
    pad = (kt - 1) // 2
    xf = x.data.reshape(m * n_t, c_in)
    spans = []
    for k in range(kt):
        lo_out = max(0, pad - k)
        lo_in = max(0, k - pad)
        length = n_t - abs(k - pad)
        spans.append((lo_out, lo_in, length))
    out = np.zeros((m, n_t, c_out))
    for k, (lo_out, lo_in, length) in enumerate(spans):
        zk = (xf @ kernel.data[k]).reshape(m, n_t, c_out)
        out[:, lo_out:lo_out + length] += zk[:, lo_in:lo_in + length]
    _check_finite(out, "conv1d_same")

    def vjp(g):
        dk = np.empty((kt, c_in, c_out))
        dx = np.zeros((m, n_t, c_in))
        for k, (lo_out, lo_in, length) in enumerate(spans):
            gs = np.ascontiguousarray(g[:, lo_out:lo_out + length]).reshape(-1, c_out)
            xs = np.ascontiguousarray(x.data[:, lo_in:lo_in + length]).reshape(-1, c_in)
            dk[k] = xs.T @ gs
            dx[:, lo_in:lo_in + length] += (gs @ kernel.data[k].T).reshape(m, length, c_in)
        return dx, dk

    return Tensor(out, (x, kernel), vjp)


def _cheb_propagate(x, stacked, korder1):
    """(T_0 X, ..., T_K X) rows; T_0 = I is implicit when the stack holds only
    the K trailing matrices, so X itself serves as the first block."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if stacked.shape[0] == korder1 * n:
        return (stacked @ flat).reshape(korder1, -1)
    if stacked.shape[0] != (korder1 - 1) * n:
        raise ShapeMismatch(f"stacked bank {stacked.shape} vs K+1={korder1}, n={n}")
    y = np.empty((korder1, n, flat.shape[1]))
    y[0] = flat
    y[1:] = (stacked @ flat).reshape(korder1 - 1, n, -1)
    return y.reshape(korder1, -1)


def _cheb_backprop(dy, stacked, korder1, n, cols):
    """Adjoint of _cheb_propagate."""
    dyb = dy.reshape(korder1, n, cols)
    if stacked.shape[0] == korder1 * n:
        return stacked.T @ dy.reshape(korder1 * n, cols)
    dxs = stacked.T @ dyb[1:].reshape((korder1 - 1) * n, cols)
    dxs += dyb[0]
    return dxs


def cheb_conv(x: Tensor, stacked, theta: Tensor) -> Tensor:
    """Graph filter: sum_k (T_k @ X) @ theta[k] over the bus axis.

    x: (n, B, T, C); stacked: constant vertical stack of the Chebyshev
    matrices, either all K+1 of them or just T_1..T_K (T_0 = I implicit);
    theta: (K+1, C, F).  Fused so every matmul runs on a contiguous view.
    """
    n, b, t, c = x.data.shape
    korder1, c_in, f = theta.data.shape
    if c_in != c:
        raise ShapeMismatch(f"theta expects C_in={c_in}, data has {c}")
    y2 = _cheb_propagate(x.data, stacked, korder1)
    y = y2.reshape(korder1, n * b * t, c)
    out = y[0] @ theta.data[0]
    for k in range(1, korder1):
        out += y[k] @ theta.data[k]
    out = out.reshape(n, b, t, f)
    _check_finite(out, "cheb_conv")

    def vjp(g):
        gf = g.reshape(n * b * t, f)
        dtheta = np.empty_like(theta.data)
        dy = np.empty((korder1, n * b * t, c))
        for k in range(korder1):
            dtheta[k] = y[k].T @ gf
            dy[k] = gf @ theta.data[k].T
        dxs = _cheb_backprop(dy, stacked, korder1, n, b * t * c)
        return dxs.reshape(n, b, t, c), dtheta

    return Tensor(out, (x, theta), vjp)


def cheb_conv_glu(x: Tensor, stacked, theta: Tensor) -> Tensor:
    """cheb_conv with the GLU fused in: theta's feature columns split into
    value/gate halves so every large intermediate stays contiguous.

    With an implicit-T_0 stack the zeroth response is the input itself (a
    free reshape view), so only K propagated blocks are materialized.
    """
    n, b, t, c = x.data.shape
    korder1, c_in, f2 = theta.data.shape
    if c_in != c or f2 % 2:
        raise ShapeMismatch(f"theta {theta.data.shape} vs data C={c}")
    h = f2 // 2
    nbt = n * b * t
    implicit = stacked.shape[0] == (korder1 - 1) * n
    if not implicit and stacked.shape[0] != korder1 * n:
        raise ShapeMismatch(f"stacked bank {stacked.shape} vs K+1={korder1}, n={n}")
    xcols = x.data.reshape(n, b * t * c)
    if implicit:
        tail = (stacked @ xcols).reshape(korder1 - 1, nbt, c) if korder1 > 1 \
            else np.empty((0, nbt, c))
        ys = [x.data.reshape(nbt, c)] + [tail[k] for k in range(korder1 - 1)]
    else:
        full = (stacked @ xcols).reshape(korder1, nbt, c)
        ys = [full[k] for k in range(korder1)]
    th = theta.data
    val = ys[0] @ th[0, :, :h]
    gate = ys[0] @ th[0, :, h:]
    for k in range(1, korder1):
        val += ys[k] @ th[k, :, :h]
        gate += ys[k] @ th[k, :, h:]
    s = expit(gate)
    val *= s
    outflat = val
    out = outflat.reshape(n, b, t, h)
    _check_finite(out, "cheb_conv_glu")

    def vjp(g):
        # value half never retained (val = out/s, so d_gate = g*out*(1-s));
        # value and gate cotangents ride one matrix so each y block is read once
        gf = g.reshape(nbt, h)
        dval = gf * s
        dgate = gf * outflat
        dgate *= 1.0 - s
        dz = np.concatenate([dval, dgate], axis=1)
        dtheta = np.empty_like(th)
        if implicit:
            dy0 = dz @ th[0].T
            dtheta[0] = ys[0].T @ dz
            if korder1 > 1:
                dtail = np.empty((korder1 - 1, nbt, c))
                for k in range(1, korder1):
                    dtheta[k] = ys[k].T @ dz
                    np.matmul(dz, th[k].T, out=dtail[k - 1])
                dxs = stacked.T @ dtail.reshape((korder1 - 1) * n, b * t * c)
                dxs += dy0.reshape(n, b * t * c)
            else:
                dxs = dy0.reshape(n, b * t * c)
        else:
            dy = np.empty((korder1, nbt, c))
            for k in range(korder1):
                dtheta[k] = ys[k].T @ dz
                np.matmul(dz, th[k].T, out=dy[k])
            dxs = stacked.T @ dy.reshape(korder1 * n, b * t * c)
        return dxs.reshape(n, b, t, c), dtheta

    return Tensor(out, (x, theta), vjp)


def conv1d_glu(x: Tensor, kernel: Tensor) -> Tensor:
    """conv1d_same with the GLU fused in (kernel columns split value/gate)."""
    if x.data.ndim != 3 or kernel.data.ndim != 3 or x.data.shape[2] != kernel.data.shape[1]:
        raise ShapeMismatch(f"conv1d_glu x{x.data.shape} kernel{kernel.data.shape}")
    kt, c_in, f2 = kernel.data.shape
    if kt % 2 == 0 or f2 % 2:
        raise ShapeMismatch("conv1d_glu needs odd kernel length and even feature width")
    h = f2 // 2
    m, n_t, _ = x.data.shape
    pad = (kt - 1) // 2
    xf = x.data.reshape(m * n_t, c_in)
    spans = []
    for k in range(kt):
        lo_out = max(0, pad - k)
        lo_in = max(0, k - pad)
        spans.append((lo_out, lo_in, n_t - abs(k - pad)))
    # center tap first: its span is the whole axis, so the dgemm products
    # initialize val/gate directly (no zero-fill) and need no slicing
    val = (xf @ kernel.data[pad, :, :h]).reshape(m, n_t, h)
    gate = (xf @ kernel.data[pad, :, h:]).reshape(m, n_t, h)
    for k, (lo_out, lo_in, length) in enumerate(spans):
        if k == pad:
            continue
        zv = (xf @ kernel.data[k, :, :h]).reshape(m, n_t, h)
        zg = (xf @ kernel.data[k, :, h:]).reshape(m, n_t, h)
        val[:, lo_out:lo_out + length] += zv[:, lo_in:lo_in + length]
        gate[:, lo_out:lo_out + length] += zg[:, lo_in:lo_in + length]
    s = expit(gate)
    val *= s
    out = val
    _check_finite(out, "conv1d_glu")

    def vjp(g):
        dval = g * s
        dgate = g * out
        dgate *= 1.0 - s
        dz = np.concatenate([dval.reshape(m, n_t, h), dgate.reshape(m, n_t, h)],
                            axis=2)
        dk = np.empty_like(kernel.data)
        dx = np.zeros((m, n_t, c_in))
        for k, (lo_out, lo_in, length) in enumerate(spans):
            if length == n_t:
                gz = dz.reshape(-1, 2 * h)
                xs = xf
            else:
                gz = np.ascontiguousarray(dz[:, lo_out:lo_out + length]).reshape(-1, 2 * h)
                xs = np.ascontiguousarray(x.data[:, lo_in:lo_in + length]).reshape(-1, c_in)
            dk[k] = xs.T @ gz
            dslice = gz @ kernel.data[k].T
            dx[:, lo_in:lo_in + length] += dslice.reshape(m, length, c_in)
        return dx, dk

    return Tensor(out, (x, kernel), vjp)


def layer_norm(x: Tensor, axis=-1, eps=1e-5, scale=None, shift=None) -> Tensor:
    """Normalize to zero mean / unit variance along one axis, optional affine.

    scale/shift are 1-D Tensors broadcast along the last axis, so affine is
    only supported for axis == -1.  The last-axis case computes its statistics
    with matvec reductions: numpy's reductions over a tiny trailing axis are
    far slower than BLAS on the flattened view.
    """
    if eps <= 0:
        raise StgcnError("layer_norm eps must be > 0")
    ax = axis if axis >= 0 else x.data.ndim + axis
    affine = scale is not None
    if affine and ax != x.data.ndim - 1:
        raise StgcnError("layer_norm affine requires axis=-1")

    if ax == x.data.ndim - 1:
        h = x.data.shape[-1]
        flat = x.data.reshape(-1, h)
        wmean = np.full(h, 1.0 / h)
        mu = flat @ wmean
        ex2 = (flat * flat) @ wmean
        var = np.maximum(ex2 - mu * mu, 0.0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat2 = (flat - mu[:, None]) * inv_std[:, None]
        xhat = xhat2.reshape(x.data.shape)
        out = xhat2 * scale.data + shift.data if affine else xhat2
        out = out.reshape(x.data.shape)
        _check_finite(out, "layer_norm")
        inv = inv_std.reshape(x.data.shape[:-1])

        def vjp(g):
            gf = g.reshape(-1, h)
            gh = gf * scale.data if affine else gf
            m1 = gh @ wmean
            m2 = (gh * xhat2) @ wmean
            dx = ((gh - m1[:, None]) - xhat2 * m2[:, None]) * inv.reshape(-1)[:, None]
            dx = dx.reshape(x.data.shape)
            if not affine:
                return (dx,)
            # column sums via matvec: numpy's axis-0 reduce is slow at tiny h
            ones_rows = np.ones(gf.shape[0])
            return dx, (gf * xhat2).T @ ones_rows, gf.T @ ones_rows

        return Tensor(out, (x, scale, shift) if affine else (x,), vjp)

    mu = x.data.mean(axis=ax, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=ax, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    _check_finite(xhat, "layer_norm")

    def vjp(g):
        m1 = g.mean(axis=ax, keepdims=True)
        m2 = (g * xhat).mean(axis=ax, keepdims=True)
        return (inv_std * (g - m1 - xhat * m2),)

    return Tensor(xhat, (x,), vjp)


def layer_norm_dropout(x: Tensor, eps, scale: Tensor, shift: Tensor,
                       rate, training, rng) -> Tensor:
    """Fused last-axis layer norm + affine + inverted dropout (one output pass
    instead of two; the block applies these back to back on its widest arrays)."""
    if eps <= 0:
        raise StgcnError("layer_norm eps must be > 0")
    if not 0.0 <= rate < 1.0:
        raise StgcnError(f"dropout rate {rate} outside [0, 1)")
    h = x.data.shape[-1]
    flat = x.data.reshape(-1, h)
    wmean = np.full(h, 1.0 / h)
    mu = flat @ wmean
    ex2 = (flat * flat) @ wmean
    var = np.maximum(ex2 - mu * mu, 0.0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat2 = (flat - mu[:, None]) * inv_std[:, None]
    out2 = xhat2 * scale.data + shift.data
    drop = training and rate > 0.0
    if drop:
        keep = rng.random((flat.shape[0], h), dtype=np.float32) >= rate
        inv_rate = 1.0 / (1.0 - rate)
        out2 *= keep
        out2 *= inv_rate
    out = out2.reshape(x.data.shape)
    _check_finite(out, "layer_norm_dropout")

    def vjp(g):
        gd = g.reshape(-1, h)
        if drop:
            gd = gd * keep
            gd *= inv_rate
        gh = gd * scale.data
        m1 = gh @ wmean
        m2 = (gh * xhat2) @ wmean
        dx = ((gh - m1[:, None]) - xhat2 * m2[:, None]) * inv_std[:, None]
        ones_rows = np.ones(gd.shape[0])
        return dx.reshape(x.data.shape), (gd * xhat2).T @ ones_rows, gd.T @ ones_rows

    return Tensor(out, (x, scale, shift), vjp)


def mean_over_axis(x: Tensor, axis) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = _check_finite(x.data.mean(axis=axes), "mean_over_axis")
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    shape = x.data.shape
    norm_axes = tuple(a if a >= 0 else x.data.ndim + a for a in axes)

    def vjp(g):
        gexp = np.expand_dims(g, norm_axes)
        return (np.broadcast_to(gexp / count, shape).copy(),)

    return Tensor(out, (x,), vjp)


def abs_forward(x: Tensor) -> Tensor:
    out = _check_finite(np.abs(x.data), "abs")
    sgn = np.sign(x.data)  # subgradient 0 at exactly 0

    def vjp(g):
        return (g * sgn,)

    return Tensor(out, (x,), vjp)


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    _check_finite(y, "softmax")

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return Tensor(y, (x,), vjp)


def dropout(x: Tensor, rate, training, rng) -> Tensor:
    """Inverted dropout: train-time zeroing with 1/(1-rate) rescale, identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise StgcnError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return Tensor(x.data, (x,), lambda g: (g,))
    keep = rng.random(x.data.shape, dtype=np.float32) >= rate
    inv = 1.0 / (1.0 - rate)
    out = x.data * keep
    out *= inv
    _check_finite(out, "dropout")

    def vjp(g):
        dx = g * keep
        dx *= inv
        return (dx,)

    return Tensor(out, (x,), vjp)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Per-sample cross entropy; labels is an int array of class indices."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeMismatch(f"cross_entropy logits{logits.data.shape} labels{labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    probs = e / se
    rows = np.arange(labels.shape[0])
    losses = np.log(se[:, 0]) - z[rows, labels]
    _check_finite(losses, "cross_entropy_with_logits")

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return Tensor(losses, (logits,), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Per-parameter max relative error of reverse-mode vs central differences."""

    def __init__(self, errors, tol):
        self.errors = dict(errors)
        self.tol = tol
        self.failed = sorted(name for name, e in self.errors.items() if e > tol)

    @property
    def passed(self):
        return not self.failed

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def lines(self):
        width = max((len(n) for n in self.errors), default=4)
        out = []
        for name in sorted(self.errors):
            status = "FAIL" if name in self.failed else "ok"
            out.append(f"{name:<{width}}  max_rel_err={self.errors[name]:.3e}  {status}")
        return out


def grad_check(f, params, h=1e-5, tol=1e-4):
    """Compare reverse-mode gradients of scalar f() against central differences.

    f must rebuild the graph from the current parameter values on every call
    and return a scalar Tensor.  Parameters are perturbed in place.
    """
    if h <= 0:
        raise StgcnError("grad_check h must be > 0")
    params = list(params)
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise ShapeMismatch("grad_check objective must be scalar")
    backward(out)
    analytic = {p.name: p.grad.copy() for p in params}
    errors = {}
    for p in params:
        flat = p.data.ravel()
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
        a = analytic[p.name].ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-5)
        errors[p.name] = float((np.abs(a - fd) / denom).max())
    return GradCheckReport(errors, tol)
