"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

numpy supplies the raw array arithmetic; this module supplies the graph.
Every operation returns a new Tensor holding a closure that maps the output
gradient back to input gradients. ``backward`` walks the graph once in
reverse topological order; gradients accumulate with sum semantics and the
caller zeroes them between steps.

Conventions pinned here:
  * element type is float32 or float64, chosen when a tensor is created and
    propagated unchanged through every op (mixing dtypes raises),
  * convolution is cross-correlation (no kernel flip), zero "same" padding,
    kernels 1x1 or 3x3, groups 1 (dense) or C_in (depthwise),
  * broadcasting is restricted to scalar-with-tensor plus the per-channel
    bias inside conv2d / the affine inside layer_norm, so every backward
    rule stays auditable.

Spatial tensors are [C,H,W] or [B,C,H,W]; all ops tolerate the extra
leading batch axis.

A graph belongs to one thread from construction through backward; distinct
graphs on distinct threads are independent, and tensors that do not
require gradients are safely shareable read-only.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ContractError, DimensionError, ConfigError

_ALLOWED = (np.float32, np.float64)


class Tensor:
    """A dense real array that can participate in a gradient tape."""

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)) else np.float32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- construction used by every op --------------------------------------
    @staticmethod
    def _result(data, parents, vjp):
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # -- bookkeeping ---------------------------------------------------------
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

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable tensor; ``name`` encodes the module path for checkpointing."""

    def __init__(self, name, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.data.dtype.name})"


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_dtypes(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractError(f"mixed element types in one graph: {dt} vs {t.dtype}")
    return dt


def _scalar_shape(shape):
    return shape == () or shape == (1,)


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def _binary_shapes(a, b, opname):
    if a.shape == b.shape or _scalar_shape(a.shape) or _scalar_shape(b.shape):
        return
    raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad, shape):
    # collapse a full-shape gradient onto a scalar operand
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape)


def add(a, b):
    _check_dtypes(a, b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._result(out_data, (a, b), vjp)


def sub(a, b):
    _check_dtypes(a, b)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._result(out_data, (a, b), vjp)


def mul(a, b):
    _check_dtypes(a, b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._result(out_data, (a, b), vjp)


def scale(a, c):
    c = float(c)

    def vjp(g):
        return (g * c,)

    return Tensor._result(a.data * c, (a,), vjp)


def texp(a):
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return Tensor._result(out_data, (a,), vjp)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through strictly inside the range."""
    x = a.data
    out_data = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)

    def vjp(g):
        return (g * inside,)

    return Tensor._result(out_data, (a,), vjp)


def sigmoid(a):
    out_data = special.expit(a.data)

    def vjp(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor._result(out_data, (a,), vjp)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * x.dtype.type(_INV_SQRT2)))
    out_data = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
        return (g * (cdf + x * pdf),)

    return Tensor._result(out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out_data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor._result(out_data, (a,), vjp)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return Tensor._result(a.data.transpose(axes), (a,), vjp)


def concat(tensors, axis=0):
    tensors = list(tensors)
    _check_dtypes(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._result(out_data, tensors, vjp)


def split(a, sections, axis=0):
    n = a.shape[axis]
    if n % sections:
        raise DimensionError(f"split: axis {axis} of size {n} not divisible by {sections}")
    step = n // sections
    pieces = []
    for i in range(sections):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        sl = tuple(sl)
        piece_data = a.data[sl].copy()

        def vjp(g, sl=sl):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        pieces.append(Tensor._result(piece_data, (a,), vjp))
    return pieces


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.asarray(g), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return Tensor._result(out_data, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    count = a.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return Tensor._result(out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# normalizations and attention helpers
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)

    return Tensor._result(out_data, (a,), vjp)


def l2_normalize(a, axis=-1, eps=1e-12):
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True) + x.dtype.type(eps))
    out_data = x / norm

    def vjp(g):
        dot = (g * x).sum(axis=axis, keepdims=True)
        return (g / norm - x * dot / norm**3,)

    return Tensor._result(out_data, (a,), vjp)


def layer_norm(a, weight=None, bias=None, axis=-1, eps=1e-6):
    """Normalize along one axis, then apply an optional per-entry affine."""
    x = a.data
    axis = axis % a.ndim
    n = x.shape[axis]
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv

    bshape = [1] * a.ndim
    bshape[axis] = n
    parents = [a]
    out_data = xhat
    if weight is not None:
        _check_dtypes(a, weight)
        out_data = out_data * weight.data.reshape(bshape)
        parents.append(weight)
    if bias is not None:
        _check_dtypes(a, bias)
        out_data = out_data + bias.data.reshape(bshape)
        parents.append(bias)

    reduce_axes = tuple(i for i in range(a.ndim) if i != axis)

    def vjp(g):
        d_hat = g if weight is None else g * weight.data.reshape(bshape)
        m1 = d_hat.mean(axis=axis, keepdims=True)
        m2 = (d_hat * xhat).mean(axis=axis, keepdims=True)
        gx = inv * (d_hat - m1 - xhat * m2)
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=reduce_axes).reshape(weight.shape))
        if bias is not None:
            grads.append(g.sum(axis=reduce_axes).reshape(bias.shape))
        return tuple(grads)

    return Tensor._result(out_data, parents, vjp)


def mul_along_axis(a, v, axis):
    """Scale entries of ``a`` by the 1-d tensor ``v`` laid along ``axis``."""
    _check_dtypes(a, v)
    axis = axis % a.ndim
    if v.ndim != 1 or v.shape[0] != a.shape[axis]:
        raise DimensionError(f"mul_along_axis: {v.shape} does not fit axis {axis} of {a.shape}")
    bshape = [1] * a.ndim
    bshape[axis] = v.shape[0]
    vb = v.data.reshape(bshape)
    out_data = a.data * vb
    reduce_axes = tuple(i for i in range(a.ndim) if i != axis)

    def vjp(g):
        return g * vb, (g * a.data).sum(axis=reduce_axes)

    return Tensor._result(out_data, (a, v), vjp)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b):
    _check_dtypes(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")

    if bd.ndim == 2:
        out_data = ad @ bd

        def vjp(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]:
        out_data = ad @ bd

        def vjp(g):
            ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
            gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
            return ga, gb

    else:
        raise DimensionError(f"matmul: unsupported operand ranks {a.shape} x {b.shape}")

    return Tensor._result(out_data, (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _patches(x4, k):
    pad = k // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(xp, (k, k), axis=(2, 3)), xp


def _shifted_dwconv3(x4, w3):
    """Depthwise 3x3 same-padding cross-correlation as 9 shifted FMAs."""
    B, C, H, W = x4.shape
    xp = np.pad(x4, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x4)
    tmp = np.empty_like(x4)
    for di in range(3):
        for dj in range(3):
            np.multiply(xp[:, :, di:di + H, dj:dj + W],
                        w3[None, :, di, dj, None, None], out=tmp)
            out += tmp
    return out


def _shifted_dwgrad_w(x4, g4):
    """grad of depthwise 3x3 weights: one reduction per tap."""
    B, C, H, W = x4.shape
    xp = np.pad(x4, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gw = np.empty((C, 3, 3), dtype=x4.dtype)
    for di in range(3):
        for dj in range(3):
            gw[:, di, dj] = (xp[:, :, di:di + H, dj:dj + W] * g4).sum(axis=(0, 2, 3))
    return gw


def conv2d(x, w, b=None, groups=1):
    """Same-padding cross-correlation; kernels 1x1/3x3, dense or depthwise."""
    _check_dtypes(*( [x, w] + ([b] if b is not None else []) ))
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d: expected [C,H,W] or [B,C,H,W] input, got {x.shape}")
    B, C, H, W = xd.shape
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
        raise ConfigError(f"conv2d: unsupported kernel shape {w.shape}; only 1x1 and 3x3")
    O, Cg, k, _ = w.shape
    if groups not in (1, C):
        raise ConfigError(f"conv2d: groups must be 1 or C_in={C}, got {groups}")
    if groups == C and (O != C or Cg != 1):
        raise DimensionError(f"conv2d: depthwise needs weight [C,1,k,k], got {w.shape} for C={C}")
    if groups == 1 and Cg != C:
        raise DimensionError(f"conv2d: weight expects {Cg} input channels, input has {C}")
    if b is not None and b.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({O},)")

    wd = w.data
    if k == 1 and groups == 1:
        w2 = wd[:, :, 0, 0]
        out = (w2 @ xd.reshape(B, C, H * W)).reshape(B, O, H, W)

        def vjp(g):
            g4 = g[None] if squeeze else g
            gx = gw = gb = None
            if x.requires_grad:
                gx = (w2.T @ g4.reshape(B, O, H * W)).reshape(B, C, H, W)
                gx = gx[0] if squeeze else gx
            if w.requires_grad:
                gw = np.tensordot(g4, xd, axes=([0, 2, 3], [0, 2, 3])).reshape(w.shape)
            if b is not None and b.requires_grad:
                gb = g4.sum(axis=(0, 2, 3))
            return _conv_grads(gx, gw, gb, b)

    elif groups == 1:
        pat, _ = _patches(xd, k)
        cols = pat.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)
        out = (cols @ wd.reshape(O, -1).T).reshape(B, H, W, O).transpose(0, 3, 1, 2)

        def vjp(g):
            g4 = g[None] if squeeze else g
            gx = gw = gb = None
            gcols = g4.transpose(0, 2, 3, 1).reshape(B * H * W, O)
            if w.requires_grad:
                gw = (gcols.T @ cols).reshape(w.shape)
            if x.requires_grad:
                gpat, _ = _patches(np.ascontiguousarray(g4), k)
                gpcols = gpat.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, O * k * k)
                wmat = wd[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(O * k * k, C)
                gx = (gpcols @ wmat).reshape(B, H, W, C).transpose(0, 3, 1, 2)
                gx = gx[0] if squeeze else gx
            if b is not None and b.requires_grad:
                gb = g4.sum(axis=(0, 2, 3))
            return _conv_grads(gx, gw, gb, b)

    elif k == 1:  # depthwise 1x1 is a per-channel scale
        w1 = wd[:, 0, 0, 0]
        out = xd * w1[None, :, None, None]

        def vjp(g):
            g4 = g[None] if squeeze else g
            gx = gw = gb = None
            if x.requires_grad:
                gx = g4 * w1[None, :, None, None]
                gx = gx[0] if squeeze else gx
            if w.requires_grad:
                gw = (g4 * xd).sum(axis=(0, 2, 3)).reshape(w.shape)
            if b is not None and b.requires_grad:
                gb = g4.sum(axis=(0, 2, 3))
            return _conv_grads(gx, gw, gb, b)

    else:  # depthwise 3x3
        out = _shifted_dwconv3(xd, wd[:, 0])

        def vjp(g):
            g4 = g[None] if squeeze else g
            g4 = np.ascontiguousarray(g4)
            gx = gw = gb = None
            if w.requires_grad:
                gw = _shifted_dwgrad_w(xd, g4)[:, None]
            if x.requires_grad:
                gx = _shifted_dwconv3(g4, wd[:, 0, ::-1, ::-1])
                gx = gx[0] if squeeze else gx
            if b is not None and b.requires_grad:
                gb = g4.sum(axis=(0, 2, 3))
            return _conv_grads(gx, gw, gb, b)

    if b is not None:
        out = out + b.data[None, :, None, None]
    out = out[0] if squeeze else out
    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, vjp)


def _conv_grads(gx, gw, gb, b):
    return (gx, gw) if b is None else (gx, gw, gb)


# ---------------------------------------------------------------------------
# scalar losses
# ---------------------------------------------------------------------------

def l1(a, b):
    """Mean absolute difference (scalar)."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"l1: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    out_data = np.abs(d).mean()

    def vjp(g):
        s = np.sign(d) * (g / d.size)
        ga = s if a.requires_grad else None
        gb = -s if b.requires_grad else None
        return ga, gb

    return Tensor._result(out_data, (a, b), vjp)


def mse(a, b):
    """Mean squared difference (scalar)."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    out_data = (d * d).mean()

    def vjp(g):
        s = d * (2.0 * g / d.size)
        ga = s if a.requires_grad else None
        gb = -s if b.requires_grad else None
        return ga, gb

    return Tensor._result(out_data, (a, b), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor."""
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar, has shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward: root does not require gradients")

    order = _toposort(root)
    flowing = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg
