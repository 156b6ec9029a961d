"""Dense-array substrate with reverse-mode gradient propagation.

A Tensor wraps a float32/float64 numpy array plus an optional gradient
buffer. Operations executed while a Graph is active append (inputs,
output, backward-rule) records to the graph's tape; Graph.backward walks
the tape once, in reverse recording order, accumulating gradients into
every tensor that requires them. Without an active graph, operations run
as plain forward math (inference mode).
"""

from __future__ import annotations

import threading

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_tls = threading.local()

_DEBUG_NAN = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_debug_nan(enabled):
    """Toggle NaN screening after every recorded forward and backward step."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


def _graph_stack():
    stack = getattr(_tls, "graphs", None)
    if stack is None:
        stack = []
        _tls.graphs = stack
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array with an attached gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

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
        """Same data, no gradient tracking."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and ndarrays are promoted to constant tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Recording tape for one forward pass; confined to a single thread."""

    def __init__(self):
        self._tape = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        assert stack and stack[-1] is self, "graph exit out of order"
        stack.pop()
        return False

    def __len__(self):
        return len(self._tape)

    def record(self, inputs, output, backward_fn):
        if _DEBUG_NAN and not np.all(np.isfinite(output.data)):
            raise FloatingPointError("non-finite values in forward output")
        self._tape.append(_TapeEntry(inputs, output, backward_fn))

    def backward(self, loss):
        """Populate grads of every requires_grad tensor reachable from loss.

        Visits each recorded operation exactly once, in reverse recording
        order; fan-out gradients accumulate by summation.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self._tape):
            out_grad = entry.output.grad
            if out_grad is None:
                continue
            grads = entry.backward_fn(out_grad)
            for tensor, grad in zip(entry.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if _DEBUG_NAN and not np.all(np.isfinite(grad)):
                    raise FloatingPointError("non-finite gradient in backward pass")
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    # fresh array each time; returned grads are never mutated
                    tensor.grad = tensor.grad + grad


def backward(graph, loss):
    """Run reverse-mode accumulation over the graph's tape from a scalar loss."""
    graph.backward(loss)


def _make_output(data, inputs, backward_fn):
    """Create an op output, recording it when a graph is active and any input needs grads."""
    graph = _active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        graph.record(tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make_output(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make_output(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make_output(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _make_output(data, (a, b), bwd)


def neg(x):
    x = as_tensor(x)
    return _make_output(-x.data, (x,), lambda g: (-g,))


def pow_(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    data = x.data ** p

    def bwd(g):
        return (g * p * x.data ** (p - 1.0),)

    return _make_output(data, (x,), bwd)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)
    return _make_output(data, (x,), lambda g: (g * data,))


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)
    return _make_output(data, (x,), lambda g: (g / x.data,))


def abs_(x):
    x = as_tensor(x)
    data = np.abs(x.data)
    sign = np.sign(x.data)
    return _make_output(data, (x,), lambda g: (g * sign,))


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes only strictly inside the bounds."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data)
    if lo is not None:
        mask = mask * (x.data > lo)
    if hi is not None:
        mask = mask * (x.data < hi)

    return _make_output(data, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)
    in_shape = x.shape
    return _make_output(data, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)
    return _make_output(data, (x,), lambda g: (np.transpose(g, inverse),))


def select(x, axis, index):
    """Take one slice along an axis, removing that axis (like x[..., index, ...])."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    data = np.take(x.data, index, axis=axis)

    def bwd(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make_output(data, (x,), bwd)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_output(data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(x.data.dtype, copy=True),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, in_shape).astype(x.data.dtype, copy=True),)

    return _make_output(data, (x,), bwd)


def mean_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    total = sum_(x, axis=axis, keepdims=keepdims)
    return mul(total, 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make_output(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# activations

_RELU6_HI = 6.0


def _relu6(v):
    return np.minimum(np.maximum(v, 0.0), _RELU6_HI)


def _relu6_mask(v):
    # subgradient 0 at both kinks
    return ((v > 0.0) & (v < _RELU6_HI)).astype(v.dtype)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


ACTIVATION_KINDS = ("relu", "relu6", "sigmoid", "hswish", "hsigmoid")


def activation(x, kind):
    """Elementwise nonlinearity.

    hswish(x) = x * relu6(x + 3) / 6 and hsigmoid(x) = relu6(x + 3) / 6,
    the piecewise-linear forms used throughout the lightweight backbone.
    """
    x = as_tensor(x)
    v = x.data
    if kind == "relu":
        data = np.maximum(v, 0.0)
        mask = (v > 0.0).astype(v.dtype)
        return _make_output(data, (x,), lambda g: (g * mask,))
    if kind == "relu6":
        data = _relu6(v)
        mask = _relu6_mask(v)
        return _make_output(data, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        data = _sigmoid(v)
        return _make_output(data, (x,), lambda g: (g * data * (1.0 - data),))
    if kind == "hswish":
        r = _relu6(v + 3.0)
        data = v * r / 6.0
        deriv = r / 6.0 + v * _relu6_mask(v + 3.0) / 6.0
        return _make_output(data, (x,), lambda g: (g * deriv,))
    if kind == "hsigmoid":
        data = _relu6(v + 3.0) / 6.0
        deriv = _relu6_mask(v + 3.0) / 6.0
        return _make_output(data, (x,), lambda g: (g * deriv,))
    raise ValueError(f"unknown activation kind: {kind!r}")


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def hswish(x):
    return activation(x, "hswish")


def hsigmoid(x):
    return activation(x, "hsigmoid")


# ---------------------------------------------------------------------------
# softmax family


def softmax(x, axis=-1):
    """Max-shifted softmax along one axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make_output(data, (x,), bwd)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def bwd(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make_output(data, (x,), bwd)


# ---------------------------------------------------------------------------
# spatial operators


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, kernel, stride=1, padding=0, groups=1):
    """2-D cross-correlation over NCHW input with an OIHW kernel.

    groups=channels gives a depthwise convolution, a 1x1 kernel a
    pointwise one. Differentiable w.r.t. both input and kernel.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"channels {c} and filters {o} must divide groups={groups}")
    if i != c // groups:
        raise ShapeError(f"kernel {kernel.shape} incompatible with input {x.shape} for groups={groups}")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kernel.shape} larger than padded input {(n, c, hp, wp)}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
    )
    cg = c // groups
    og = o // groups
    # (n, g, cg*kh*kw, ho*wo)
    cols = (
        view.reshape(n, groups, cg, ho, wo, kh, kw)
        .transpose(0, 1, 2, 5, 6, 3, 4)
        .reshape(n, groups, cg * kh * kw, ho * wo)
    )
    wmat = kernel.data.reshape(groups, og, cg * kh * kw)
    out = np.matmul(wmat[None], cols).reshape(n, o, ho, wo)

    def bwd(g):
        gmat = g.reshape(n, groups, og, ho * wo)
        gw = np.einsum("ngop,ngkp->gok", gmat, cols).reshape(o, cg, kh, kw)
        gcols = np.matmul(np.swapaxes(wmat, 1, 2)[None], gmat)
        gcols = gcols.reshape(n, groups, cg, kh, kw, ho, wo).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a : a + sh * ho : sh, b : b + sw * wo : sw] += gcols[:, :, a, b]
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return (gx, gw.astype(kernel.data.dtype, copy=False))

    return _make_output(out, (x, kernel), bwd)


def global_avg_pool(x):
    """Per-channel spatial mean: NCHW -> NC11."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.data.dtype, copy=True),)

    return _make_output(data, (x,), bwd)


def upsample_nearest(x, factor):
    """Integer-factor nearest-neighbour upsampling of NCHW maps."""
    x = as_tensor(x)
    f = int(factor)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    data = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make_output(data, (x,), bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must map the tensor x to a scalar Tensor. Returns
    max over elements of |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    Use float64 tensors; 1e-4 tolerances are unreachable in float32.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.zero_grad()
    graph = Graph()
    with graph:
        loss = f(x)
    graph.backward(loss)
    analytic = x.grad
    if analytic is None:
        analytic = np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    cd = np.zeros_like(flat)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = float(f(x).data)
        flat[idx] = orig - eps
        lo = float(f(x).data)
        flat[idx] = orig
        cd[idx] = (hi - lo) / (2.0 * eps)
    cd = cd.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(cd)), 1e-8)
    return float(np.max(np.abs(analytic - cd) / denom))
