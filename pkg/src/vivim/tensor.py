"""Dense tensors with reverse-mode differentiation on top of numpy.

Every differentiable operation records its parents and a closure that maps the
output adjoint to one adjoint per parent. ``backward`` walks the recorded graph
in reverse topological order and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

import contextlib
import math
import weakref
from typing import Callable, Iterable, Sequence

import numba
import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MemoryExhausted(MemoryError):
    pass


_DTYPE = np.float64
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class AllocationCounter:
    """Tracks live and peak bytes of engine-owned arrays.

    Tracking is off by default; the scaling benchmark switches it on. A cap
    turns an allocation that would exceed it into ``MemoryExhausted`` before
    numpy is asked for the memory.
    """

    def __init__(self) -> None:
        self.enabled = False
        self.live = 0
        self.peak = 0
        self.cap: int | None = None

    def reset(self, cap: int | None = None) -> None:
        self.live = 0
        self.peak = 0
        self.cap = cap

    def reserve(self, nbytes: int) -> None:
        if self.enabled and self.cap is not None and self.live + nbytes > self.cap:
            raise MemoryExhausted(
                f"allocation of {nbytes} bytes exceeds cap {self.cap} (live {self.live})")

    def track(self, array: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return array
        nbytes = int(array.nbytes)
        self.reserve(nbytes)
        self.live += nbytes
        self.peak = max(self.peak, self.live)
        weakref.finalize(array, self._release, nbytes)
        return array

    def _release(self, nbytes: int) -> None:
        self.live -= nbytes

    @contextlib.contextmanager
    def tracking(self, cap: int | None = None):
        previous = self.enabled
        self.reset(cap)
        self.enabled = True
        try:
            yield self
        finally:
            self.enabled = previous


memory = AllocationCounter()


def _reserve_like(shape: Sequence[int]) -> None:
    if memory.enabled:
        memory.reserve(int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPE).itemsize)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op",
                 "name", "__weakref__")
    __array_ufunc__ = None  # numpy defers to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = memory.track(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _check_broadcast(a, b, "add")
    _reserve_like(shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _check_broadcast(a, b, "sub")
    _reserve_like(shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _check_broadcast(a, b, "mul")
    _reserve_like(shape)
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward_fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary ----------------------------------------------------

def _unary(a: Tensor, value: np.ndarray, local_grad: Callable[[], np.ndarray], op: str) -> Tensor:
    return _make(value, (a,), lambda g: (g * local_grad(),), op)


def exp(a) -> Tensor:
    a = as_tensor(a)
    _reserve_like(a.shape)
    out = np.exp(a.data)
    return _unary(a, out, lambda: out, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary(a, out, lambda: 0.5 / out, "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _unary(a, out, lambda: out * (1.0 - out), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _unary(a, a.data * s, lambda: s * (1.0 + a.data * (1.0 - s)), "silu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, _softplus(a.data), lambda: _sigmoid(a.data), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(out, (a,), backward_fn, "mean")


# -- shape manipulation ---------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward_fn, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def getitem(a, index) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis, None)."""
    a = as_tensor(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    else:
        out = np.ascontiguousarray(out)

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(out, (a,), backward_fn, "slice")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index vector (permutations, reversal)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), backward_fn, "take")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.ascontiguousarray(np.flip(a.data, axis=axis))
    return _make(out, (a,), lambda g: (np.flip(g, axis=axis),), "flip")


def pad(a, widths) -> Tensor:
    a = as_tensor(a)
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    out = np.pad(a.data, widths)
    index = tuple(slice(lo, n + lo) for (lo, _), n in zip(widths, a.shape))
    return _make(out, (a,), lambda g: (g[index],), "pad")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes of either side are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes of {a.shape} and {b.shape} differ") from None
    _reserve_like(batch + (a.shape[-2], b.shape[-1]))
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward_fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (y.shape[-1],))


# -- normalisation and attention helpers ----------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _reserve_like(a.shape)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = np.exp(shifted)
    out /= out.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward_fn, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} does not match gamma {gamma.shape} "
                         f"/ beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward_fn, "layer_norm")


# -- convolutions ---------------------------------------------------------

@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _dw_forward(xp, k, out):
    n, c, T, H, W = out.shape
    kt, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    for b in range(n):
        for ch in range(c):
            for dt in range(kt):
                for dh in range(kh):
                    for dw in range(kw):
                        wv = k[ch, dt, dh, dw]
                        for t in range(T):
                            for i in range(H):
                                for j in range(W):
                                    out[b, ch, t, i, j] += wv * xp[b, ch, t + dt, i + dh, j + dw]


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _dw_backward(xp, k, g, gxp, gk, want_x, want_k):
    n, c, T, H, W = g.shape
    kt, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    for b in range(n):
        for ch in range(c):
            for dt in range(kt):
                for dh in range(kh):
                    for dw in range(kw):
                        wv = k[ch, dt, dh, dw]
                        acc = 0.0
                        for t in range(T):
                            for i in range(H):
                                for j in range(W):
                                    gv = g[b, ch, t, i, j]
                                    if want_x:
                                        gxp[b, ch, t + dt, i + dh, j + dw] += wv * gv
                                    if want_k:
                                        acc += gv * xp[b, ch, t + dt, i + dh, j + dw]
                        gk[ch, dt, dh, dw] += acc


def depthwise_conv3d(x, kernel, bias=None) -> Tensor:
    """Per-channel 3-D convolution with 'same' zero padding.

    ``x`` is (..., C, T, H, W) and ``kernel`` is (C, kt, kh, kw) with odd
    extents; a kernel of temporal extent 1 gives a depthwise 2-D convolution.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 4 or kernel.ndim != 4 or x.shape[-4] != kernel.shape[0]:
        raise ShapeError(f"depthwise_conv3d: input {x.shape} and kernel {kernel.shape} "
                         "disagree on channels")
    kt, kh, kw = kernel.shape[1:]
    if not (kt % 2 and kh % 2 and kw % 2):
        raise ShapeError("depthwise_conv3d: kernel extents must be odd")
    C, T_, H, W = x.shape[-4:]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xd = x.data.reshape((-1, C, T_, H, W))
    xp = np.pad(xd, [(0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)])
    k = np.ascontiguousarray(kernel.data)
    out = np.zeros(xd.shape, dtype=xd.dtype)
    _dw_forward(xp, k, out)
    parents: tuple = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(C, 1, 1, 1)
        parents = (x, kernel, bias)

    def backward_fn(g):
        g = np.ascontiguousarray(g.reshape(out.shape))
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        _dw_backward(xp, k, g, gxp, gk, x.requires_grad, kernel.requires_grad)
        gx = gxp[:, :, pt:pt + T_, ph:ph + H, pw:pw + W].reshape(x.shape) if x.requires_grad else None
        grads = [gx, gk if kernel.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out.reshape(x.shape), parents, backward_fn, "depthwise_conv3d")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution. ``x`` is (N, Cin, H, W); ``weight`` is (Cout, Cin, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    xp = np.pad(x.data, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]  # (n, cin, ho, wo, kh, kw)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, backward_fn, "conv2d")


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False)
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Resize the last two axes of ``x`` to ``size`` (align_corners=False)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    mh = _bilinear_matrix(h, size[0]).astype(x.data.dtype)
    mw = _bilinear_matrix(w, size[1]).astype(x.data.dtype)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,), "upsample_bilinear")


# -- cumulative scan ------------------------------------------------------

def linear_scan(a, b, axis: int = 0) -> Tensor:
    """First-order linear recurrence ``h_t = a_t * h_{t-1} + b_t`` with ``h_{-1} = 0``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"linear_scan: coefficient shape {a.shape} != input shape {b.shape}")
    axis = axis % a.ndim
    ad = np.moveaxis(a.data, axis, 0)
    bd = np.moveaxis(b.data, axis, 0)
    if ad.shape[0] == 0:
        raise ShapeError("linear_scan: empty sequence")
    h = np.empty_like(bd)
    h[0] = bd[0]
    for t in range(1, h.shape[0]):
        h[t] = ad[t] * h[t - 1] + bd[t]

    def backward_fn(g):
        g = np.moveaxis(g, axis, 0)
        adj = np.empty_like(g)
        adj[-1] = g[-1]
        for t in range(g.shape[0] - 2, -1, -1):
            adj[t] = g[t] + ad[t + 1] * adj[t + 1]
        ga = np.zeros_like(adj)
        ga[1:] = adj[1:] * h[:-1]
        return np.moveaxis(ga, 0, axis), np.moveaxis(adj, 0, axis)

    return _make(np.moveaxis(h, 0, axis), (a, b), backward_fn, "linear_scan")


# -- backward pass --------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Reverse-mode accumulation from a scalar root.

    Leaves accumulate into ``.grad`` across calls; intermediate tensors get the
    adjoint of this pass. Without ``retain_graph`` the graph is released.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward called on a tensor that is detached from any graph")
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    while order:
        node = order.pop()
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
        del node


# -- verification harness -------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-4,
                      coords: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    The error at a coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("function value is not finite")
    backward(out)
    analytic = leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(base.size)
    idx = range(base.size) if coords is None else list(coords)
    worst = 0.0
    flat = base.reshape(-1)
    for i in idx:
        values = []
        for step in (h, -h):
            probe = flat.copy()
            probe[i] += step
            with no_grad():
                val = f(Tensor(probe.reshape(base.shape))).data
            if not np.all(np.isfinite(val)):
                raise NonFiniteError(f"function value is not finite at coordinate {i}")
            values.append(float(np.sum(val)))
        numeric = (values[0] - values[1]) / (2 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    if math.isnan(worst):
        raise NonFiniteError("gradient comparison produced NaN")
    return worst
