"""Dense tensors with reverse-mode automatic differentiation.

Every model computation flows through the primitives in this module. A
tensor produced by a primitive keeps references to its parents and a closure
that routes the output gradient back to them; one call to :func:`backward`
per forward pass accumulates exact first-order gradients. Graphs are
single-use: ``backward`` frees them and a second call raises ``GraphError``.

Training runs in float32. Gradient checking builds the same graphs in
float64 (the dtype of the leaves propagates through all primitives).

Broadcasting is deliberately restricted: two operands must have equal
shapes, or the smaller shape must be an exact trailing suffix of the larger
one (a 0-d scalar is a suffix of everything). Anything else is a
``ShapeError`` — silent shape bugs are worse than verbose reshapes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import GraphError, ShapeError


class Tensor:
    """Dense n-d float array that records how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Copy of the value as a fresh leaf, cut off from the graph."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions are the actual primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def constant(data, dtype=None):
    """Leaf tensor that never receives gradient."""
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _accumulate(t, g, owned=False):
    # ``owned`` promises g is a freshly computed buffer no one else holds, so
    # the first accumulation may keep it without a defensive copy
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
        owned = True
    if t.grad is None:
        t.grad = g if owned else g.copy()
    else:
        t.grad += g


def _check_suffix_broadcast(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or small != big[len(big) - len(small):]:
        raise ShapeError(op, f"shapes {sa} and {sb} are not equal and neither is a "
                             f"trailing suffix of the other")


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise binary primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_suffix_broadcast("add", a, b)
    out_data = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accumulate(a, ga, owned=ga is not g)
        gb = _unbroadcast(g, b.shape)
        _accumulate(b, gb, owned=gb is not g)

    return _result(out_data, (a, b), backward, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_suffix_broadcast("sub", a, b)
    out_data = a.data - b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accumulate(a, ga, owned=ga is not g)
        _accumulate(b, -_unbroadcast(g, b.shape), owned=True)

    return _result(out_data, (a, b), backward, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_suffix_broadcast("mul", a, b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(g * a.data, b.shape), owned=True)

    return _result(out_data, (a, b), backward, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_suffix_broadcast("div", a, b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape), owned=True)

    return _result(out_data, (a, b), backward, "div")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product on the last two axes; leading axes follow the suffix rule."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and la[len(la) - len(lb):] != lb and lb[len(lb) - len(la):] != la:
        raise ShapeError("matmul", f"leading dims incompatible: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape), owned=True)
        _accumulate(b, _unbroadcast(gb, b.shape), owned=True)

    return _result(out_data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolutions (time-major: input [T, C])
# ---------------------------------------------------------------------------

def _conv_out_len(t, kernel, stride, padding, dilation):
    span = (kernel - 1) * dilation + 1
    return (t + 2 * padding - span) // stride + 1


def conv1d(x, w, bias=None, stride=1, padding=0, dilation=1):
    """1-d convolution. ``x`` is [T, C_in], ``w`` is [K, C_in, C_out]."""
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError("conv1d", f"expected x [T, C_in] and w [K, C_in, C_out], "
                                   f"got {x.shape} and {w.shape}")
    t, c_in = x.shape
    k, c_in_w, c_out = w.shape
    if c_in != c_in_w:
        raise ShapeError("conv1d", f"input has {c_in} channels but kernel expects {c_in_w}")
    t_out = _conv_out_len(t, k, stride, padding, dilation)
    if t_out < 1:
        raise ShapeError("conv1d", f"input length {t} too short for kernel {k} "
                                   f"(stride {stride}, padding {padding}, dilation {dilation})")
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :] * dilation
    win = xp[idx]                                   # [T_out, K, C_in]
    out_data = np.tensordot(win, w.data, axes=([1, 2], [0, 1]))
    if bias is not None:
        out_data = out_data + bias.data

    def backward(g):
        _accumulate(w, np.einsum("tki,to->kio", win, g), owned=True)
        if x.requires_grad:
            gwin = np.einsum("to,kio->tki", g, w.data)
            gxp = np.zeros_like(xp)
            last = (t_out - 1) * stride + 1
            for j in range(k):
                gxp[j * dilation:j * dilation + last:stride] += gwin[:, j]
            gx = gxp[padding:padding + t] if padding else gxp
            _accumulate(x, gx, owned=True)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0), owned=True)

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out_data, parents, backward, "conv1d")


def dwconv1d(x, w, stride=1, padding=0, dilation=1):
    """Depthwise 1-d convolution. ``x`` is [T, C], ``w`` is [K, C]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError("dwconv1d", f"expected x [T, C] and w [K, C], got {x.shape} and {w.shape}")
    t, c = x.shape
    k, c_w = w.shape
    if c != c_w:
        raise ShapeError("dwconv1d", f"input has {c} channels but kernel has {c_w}")
    t_out = _conv_out_len(t, k, stride, padding, dilation)
    if t_out < 1:
        raise ShapeError("dwconv1d", f"input length {t} too short for kernel {k}")
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :] * dilation
    win = xp[idx]                                   # [T_out, K, C]
    out_data = np.einsum("tkc,kc->tc", win, w.data)

    def backward(g):
        _accumulate(w, np.einsum("tkc,tc->kc", win, g), owned=True)
        if x.requires_grad:
            gwin = g[:, None, :] * w.data[None, :, :]
            gxp = np.zeros_like(xp)
            last = (t_out - 1) * stride + 1
            for j in range(k):
                gxp[j * dilation:j * dilation + last:stride] += gwin[:, j]
            _accumulate(x, gxp[padding:padding + t] if padding else gxp,
                        owned=True)

    return _result(out_data, (x, w), backward, "dwconv1d")


def conv_transpose1d(x, w, stride=1):
    """Transposed 1-d convolution. ``x`` is [T, C_in], ``w`` is [K, C_in, C_out];
    output length is (T-1)*stride + K."""
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError("conv_transpose1d", f"expected x [T, C_in] and w [K, C_in, C_out], "
                                             f"got {x.shape} and {w.shape}")
    t, c_in = x.shape
    k, c_in_w, c_out = w.shape
    if c_in != c_in_w:
        raise ShapeError("conv_transpose1d", f"input has {c_in} channels but kernel expects {c_in_w}")
    t_out = (t - 1) * stride + k
    out_data = np.zeros((t_out, c_out), dtype=x.data.dtype)
    last = (t - 1) * stride + 1
    for j in range(k):
        out_data[j:j + last:stride] += x.data @ w.data[j]

    def backward(g):
        gw = np.empty_like(w.data)
        gx = np.zeros_like(x.data) if x.requires_grad else None
        for j in range(k):
            gj = g[j:j + last:stride]
            gw[j] = x.data.T @ gj
            if gx is not None:
                gx += gj @ w.data[j].T
        _accumulate(w, gw, owned=True)
        if gx is not None:
            _accumulate(x, gx, owned=True)

    return _result(out_data, (x, w), backward, "conv_transpose1d")


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply learnable scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", f"gain/bias must be [{d}], got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out_data = xh * gain.data + bias.data

    def backward(g):
        _accumulate(gain, (g * xh).reshape(-1, d).sum(axis=0), owned=True)
        _accumulate(bias, g.reshape(-1, d).sum(axis=0), owned=True)
        if x.requires_grad:
            gxh = g * gain.data
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                        - xh * (gxh * xh).mean(axis=-1, keepdims=True))
            _accumulate(x, gx, owned=True)

    return _result(out_data, (x, gain, bias), backward, "layer_norm")


def softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)), owned=True)

    return _result(s, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse

    def backward(g):
        _accumulate(x, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True), owned=True)

    return _result(out_data, (x,), backward, "log_softmax")


def sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accumulate(x, g * s * (1.0 - s), owned=True)

    return _result(s, (x,), backward, "sigmoid")


def relu(x):
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0).astype(x.dtype)

    def backward(g):
        _accumulate(x, g * mask, owned=True)

    return _result(out_data, (x,), backward, "relu")


def prelu(x, slope):
    """Parametric ReLU with one learnable scalar slope for the negative part."""
    if slope.size != 1:
        raise ShapeError("prelu", f"slope must be a scalar, got shape {slope.shape}")
    mask = x.data >= 0
    a = float(slope.data)
    out_data = np.where(mask, x.data, a * x.data).astype(x.dtype)

    def backward(g):
        _accumulate(x, g * np.where(mask, 1.0, a), owned=True)
        _accumulate(slope, np.asarray((g * np.where(mask, 0.0, x.data)).sum(),
                                      dtype=slope.dtype).reshape(slope.shape))

    return _result(out_data, (x, slope), backward, "prelu")


def softplus(x):
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|))."""
    out_data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def backward(g):
        _accumulate(x, g / (1.0 + np.exp(-x.data)), owned=True)

    return _result(out_data.astype(x.dtype), (x,), backward, "softplus")


def exp(x):
    e = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * e, owned=True)

    return _result(e, (x,), backward, "exp")


def log(x):
    out_data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data, owned=True)

    return _result(out_data, (x,), backward, "log")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def concat(tensors, axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "need at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result(out_data, tuple(tensors), backward, "concat")


def index(x, key):
    """Basic (int/slice) indexing; each source element is selected at most once."""
    out_data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        _accumulate(x, gx, owned=True)

    return _result(out_data, (x,), backward, "slice")


def reshape(x, shape):
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(out_data, (x,), backward, "reshape")


def transpose(x, axes):
    out_data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _result(out_data, (x,), backward, "transpose")


def tsum(x, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(ge, x.shape))

    return _result(out_data, (x,), backward, "sum")


def tmean(x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    out_data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / n, x.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(ge / n, x.shape))

    return _result(out_data, (x,), backward, "mean")


def upsample_repeat(x, factor, axis=0):
    """Repeat each slice along ``axis`` ``factor`` times (nearest-neighbor)."""
    if factor < 1 or int(factor) != factor:
        raise ShapeError("upsample_repeat", f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    out_data = np.repeat(x.data, factor, axis=axis)

    def backward(g):
        shape = list(x.shape)
        shape[axis:axis + 1] = [shape[axis], factor]
        _accumulate(x, g.reshape(shape).sum(axis=axis + 1), owned=True)

    return _result(out_data, (x,), backward, "upsample_repeat")


def embedding(table, ids):
    """Row lookup. ``table`` is [N, D]; ``ids`` is an integer array, not a Tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"ids out of range for table with {table.shape[0]} rows")
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt, owned=True)

    return _result(out_data, (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# attention (composite of the primitives above)
# ---------------------------------------------------------------------------

_NEG_FILL = -1e9


def attention(q, k, v, causal=False):
    """Scaled dot-product attention over the last two axes.

    ``q`` is [..., T_q, D], ``k``/``v`` are [..., T_k, D]; a causal mask blocks
    positions j > i with a large negative additive constant.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError("attention", f"query dim {d} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = mul(matmul(q, transpose(k, axes)), 1.0 / math.sqrt(d))
    if causal:
        tq, tk = q.shape[-2], k.shape[-2]
        m = np.where(np.arange(tk)[None, :] > np.arange(tq)[:, None], _NEG_FILL, 0.0)
        scores = add(scores, constant(m.astype(q.dtype)))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# primitive registry and backward pass
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv1d": conv1d,
    "dwconv1d": dwconv1d,
    "conv_transpose1d": conv_transpose1d,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sigmoid": sigmoid,
    "relu": relu,
    "prelu": prelu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "concat": concat,
    "slice": index,
    "reshape": reshape,
    "transpose": transpose,
    "sum": tsum,
    "mean": tmean,
    "upsample_repeat": upsample_repeat,
    "embedding": embedding,
    "attention": attention,
}


def apply_primitive(kind, inputs, attrs=None):
    """Dispatch ``kind`` on ``inputs`` with keyword ``attrs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    if kind in ("concat",):
        return fn(inputs, **(attrs or {}))
    return fn(*inputs, **(attrs or {}))


def _topo_order(root):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss):
    """Reverse sweep from a scalar loss; accumulates ``grad`` on every
    reachable tensor with ``requires_grad``. Consumes the graph."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed; run a new forward pass before backward")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # free the graph so intermediate buffers can be collected between steps
    for node in order:
        if node is not loss:
            node._backward = None
            node._parents = ()
