"""Dense NCHW tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any operand has
``requires_grad`` set, the result remembers its parents and a closure that
maps the upstream gradient to parent gradients. :func:`backward` walks that
graph from a scalar loss; the traversal state lives only inside the call, so
independent graphs can be differentiated from different threads.

Convolutions are lowered to a single GEMM over an im2col buffer, which keeps
the forward pass deterministic for a fixed BLAS and input shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientError, NumericFault, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    dims = shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericFault(f"{op}: non-finite values in output")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------

def _topological_order(root: Tensor):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``. Calling twice without zeroing adds the
    gradients."""
    if loss.data.size != 1:
        raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from the gradient graph")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.dtype:
                pg = pg.astype(parent.dtype)
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), grad_fn, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(x.data, x.dtype.type(p))

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.data, x.dtype.type(p - 1.0))
        # subgradient 0 at the origin for fractional exponents
        d = np.where(x.data > 0, d, 1.0 if p == 1.0 else 0.0).astype(x.dtype)
        return (g * d,)

    return _node(out, (x,), grad_fn, "pow")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _node(out, (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def tabs(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(x.data, lo, hi)

    def grad_fn(g):
        keep = np.ones(x.shape, dtype=bool)
        if lo is not None:
            keep &= x.data >= lo
        if hi is not None:
            keep &= x.data <= hi
        return (g * keep,)

    return _node(out, (x,), grad_fn, "clip")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _node(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ----------------------------------------------------------------------
# shape manipulation and reductions
# ----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _node(np.array(x.data[index]), (x,), grad_fn, "getitem")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), grad_fn, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(count))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis -3 for both CHW and NCHW)."""
    return concat(tensors, axis=-3)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: Optional[int] = None
    depthwise: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride) < 1:
            raise ShapeError(f"non-positive extent in {self}")
        if self.depthwise and self.in_channels != self.out_channels:
            raise ShapeError("depthwise convolution needs in_channels == out_channels")

    @property
    def pads(self):
        if self.padding is None:
            return self.kernel_h // 2, self.kernel_w // 2
        return self.padding, self.padding

    @property
    def weight_shape(self):
        if self.depthwise:
            return (self.out_channels, 1, self.kernel_h, self.kernel_w)
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected a CHW or NCHW tensor, got shape {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, ho, wo):
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return out


def _check_bias(bias, channels):
    if bias is not None and bias.shape != (channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({channels},)")


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation with zero padding; accepts CHW or NCHW input."""
    x, squeeze = _batched(as_tensor(x))
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weights.shape} != {spec.weight_shape}")
    _check_bias(bias, spec.out_channels)
    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    ph, pw = spec.pads
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: {h}x{w} input too small for a {kh}x{kw} kernel")
    ho = (h + 2 * ph - kh) // s + 1
    wo = (w + 2 * pw - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, s, ho, wo)  # n, c, k, p
    wd = weights.data
    if spec.depthwise:
        wk = wd.reshape(c, 1, kh * kw)
        out = np.matmul(wk, cols).reshape(n, c, ho, wo)
    else:
        cols = cols.reshape(n, c * kh * kw, ho * wo)
        wm = wd.reshape(spec.out_channels, -1)
        out = np.matmul(wm, cols).reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    parents = (x, weights) if bias is None else (x, weights, bias)

    def grad_fn(g):
        gp = g.reshape(n, g.shape[1], ho * wo)
        gx = gw = gb = None
        if spec.depthwise:
            if weights.requires_grad:
                gw = np.matmul(cols, gp[:, :, :, None]).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                dcols = wk.reshape(c, kh * kw)[None, :, :, None] * gp[:, :, None, :]
                gx = _col2im(dcols, xp.shape, kh, kw, s, ho, wo)
        else:
            if weights.requires_grad:
                gw = np.matmul(gp, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                dcols = np.matmul(wm.T, gp)
                gx = _col2im(dcols, xp.shape, kh, kw, s, ho, wo)
        if gx is not None:
            gx = gx[:, :, ph : ph + h, pw : pw + w]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    result = _node(out, parents, grad_fn, "conv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def deconv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution (the adjoint of :func:`conv2d`).

    Weights are laid out ``(in_channels, out_channels, kh, kw)``. Padding
    defaults to 1, so a 4x4 kernel with stride 2 exactly doubles H and W.
    """
    x, squeeze = _batched(as_tensor(x))
    n, c, h, w = x.shape
    cin, cout = spec.in_channels, spec.out_channels
    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    p = 1 if spec.padding is None else spec.padding
    if c != cin:
        raise ShapeError(f"deconv2d: input has {c} channels, spec expects {cin}")
    if weights.shape != (cin, cout, kh, kw):
        raise ShapeError(f"deconv2d: weight shape {weights.shape} != {(cin, cout, kh, kw)}")
    _check_bias(bias, cout)
    hf, wf = (h - 1) * s + kh, (w - 1) * s + kw
    ho, wo = hf - 2 * p, wf - 2 * p
    if ho < 1 or wo < 1:
        raise ShapeError("deconv2d: padding larger than the output")
    wm = weights.data.reshape(cin, cout * kh * kw)
    xm = x.data.reshape(n, cin, h * w)
    dcols = np.matmul(wm.T, xm)
    full = _col2im(dcols, (n, cout, hf, wf), kh, kw, s, h, w)
    out = np.ascontiguousarray(full[:, :, p : p + ho, p : p + wo])
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weights) if bias is None else (x, weights, bias)

    def grad_fn(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
        gcols = _im2col(gfull, kh, kw, s, h, w).reshape(n, cout * kh * kw, h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wm, gcols).reshape(x.shape)
        if weights.requires_grad:
            gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    result = _node(out, parents, grad_fn, "deconv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


# ----------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------

def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes (odd tails dropped)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"avg_pool2: input {h}x{w} is too small")
    lead = x.shape[:-2]
    blocks = x.data[..., : 2 * h2, : 2 * w2].reshape(lead + (h2, 2, w2, 2))
    out = blocks.sum(axis=(-3, -1)) * x.dtype.type(0.25)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g * x.dtype.type(0.25), 2, axis=-2), 2, axis=-1)
        full[..., : 2 * h2, : 2 * w2] = up
        return (full,)

    return _node(out, (x,), grad_fn, "avg_pool2")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: half-pixel centres, source clamped to the valid range
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target size {out_h}x{out_w}")
    h, w = x.shape[-2:]
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _node(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),), "bilinear_resize")
