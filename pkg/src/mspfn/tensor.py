"""Rank-4 tensors with reverse-mode automatic differentiation.

Every value in the network is an ``(N, C, H, W)`` array. Operations build a
graph of parent links and backward closures; :meth:`Tensor.backward` walks it
in reverse topological order and then releases it, so each training step
records a fresh graph.

Convolutions use an im2col layout over :func:`numpy.lib.stride_tricks.
sliding_window_view` with a fixed reduction order, which keeps forward and
backward passes bit-deterministic for a fixed BLAS thread count.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "make_op",
    "conv2d",
    "conv2d_transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "clamp",
    "concat_channels",
    "slice_channels",
    "global_avg_pool",
    "pad_reflect",
    "sum_all",
    "mean_all",
]

_FLOAT_TYPES = (np.float32, np.float64)
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A ``(N, C, H, W)`` float array that may carry a gradient.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad`` after a
    backward pass. Intermediate tensors only keep their gradient when
    :meth:`retain_grad` was called.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- introspection --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
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
        return scale(self, -1.0)

    # -- reverse mode ---------------------------------------------------------
    def backward(self) -> None:
        """Back-propagate from this scalar node, then free the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
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
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Wrap ``data`` as the output of an operation.

    ``backward(g)`` must return one gradient (or ``None``) per parent, each
    shaped like that parent.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = name
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), x, dtype=like.dtype))


# -- elementwise ----------------------------------------------------------------


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if a.data.size == 1 or b.data.size == 1:
        return sa if b.data.size == 1 else sb
    big, small = (sa, sb) if a.data.size >= b.data.size else (sb, sa)
    ok = (
        small[1] == big[1]
        and small[2] == 1
        and small[3] == 1
        and small[0] in (1, big[0])
    )
    if not ok:
        raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")
    return big


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return make_op(x.data * f, (x,), lambda g: (g * f,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = y.astype(x.dtype, copy=False)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return make_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


# -- structural -------------------------------------------------------------------


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) == 1 and not isinstance(tensors[0], Tensor):
        tensors = tuple(tensors[0])
    ref = tensors[0].shape
    for t in tensors[1:]:
        s = t.shape
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: shapes {ref} and {s} differ outside the channel axis")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return make_op(data, tensors, backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = x.shape
    if not 0 <= start <= stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)

    return make_op(x.data[:, start:stop], (x,), backward, "slice")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError("global_avg_pool on an empty spatial plane")
    mean = x.data.sum(axis=(2, 3), keepdims=True, dtype=np.float64) / (h * w)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return make_op(mean.astype(x.dtype), (x,), backward, "global_avg_pool")


def pad_reflect(x: Tensor, pad: int) -> Tensor:
    """Mirror-pad H and W by ``pad`` pixels, edge pixel not repeated."""
    if pad == 0:
        return x
    n, c, h, w = x.shape
    if pad >= h or pad >= w:
        raise ShapeError(f"reflect pad {pad} too large for spatial size {h}x{w}")
    idx_h = np.pad(np.arange(h), pad, mode="reflect")
    idx_w = np.pad(np.arange(w), pad, mode="reflect")
    data = x.data[:, :, idx_h][:, :, :, idx_w]

    def backward(g):
        gh = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(gh, (slice(None), slice(None), idx_h), g)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), idx_w), gh)
        return (gx,)

    return make_op(data, (x,), backward, "pad_reflect")


def sum_all(x: Tensor) -> Tensor:
    total = x.data.sum(dtype=np.float64)
    out = np.full((1, 1, 1, 1), total, dtype=x.dtype)
    return make_op(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.full((1, 1, 1, 1), x.data.mean(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g.reshape(()) / n, x.shape).astype(x.dtype),)

    return make_op(out, (x,), backward, "mean")


# -- convolution ------------------------------------------------------------------


def _pad_zero(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _cols(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """im2col as ``(N, C*kh*kw, Ho*Wo)``; a free reshape for 1x1 stride-1 kernels."""
    n, c, hp, wp = xp.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n, c, hp * wp), ho, wo
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo), ho, wo


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Cross-correlate an already padded input with ``w`` [O, C, kh, kw]."""
    o, c, kh, kw = w.shape
    cols, ho, wo = _cols(xp, kh, kw, stride)
    out = np.matmul(w.reshape(o, c * kh * kw), cols)
    return out.reshape(xp.shape[0], o, ho, wo)


def _scatter_input(g: np.ndarray, w: np.ndarray, stride: int, padded_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_correlate` w.r.t. its (padded) input."""
    o, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    cols = np.matmul(w.reshape(o, c * kh * kw).T, g.reshape(n, o, ho * wo))
    if kh == kw == 1 and stride == 1 and tuple(padded_hw) == (ho, wo):
        return cols.reshape(n, c, ho, wo)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c) + tuple(padded_hw), dtype=g.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + span_h : stride, j : j + span_w : stride] += cols[:, :, i, j]
    return out


def _weight_grad(xp: np.ndarray, g: np.ndarray, kshape: tuple[int, int], stride: int) -> np.ndarray:
    kh, kw = kshape
    n, o, ho, wo = g.shape
    c = xp.shape[1]
    cols, _, _ = _cols(xp, kh, kw, stride)
    gw = np.matmul(g.reshape(n, o, ho * wo), cols.transpose(0, 2, 1))
    return gw.sum(axis=0).reshape(o, c, kh, kw)


def _input_grad(g: np.ndarray, w: np.ndarray, stride: int, padded_hw: tuple[int, int]) -> np.ndarray:
    o, c, kh, kw = w.shape
    if stride == 1 and c > o and kh * kw > 1:
        # cheaper as a full correlation with the flipped kernel when the layer narrows
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, padded_hw[0] - g.shape[2]), (kw - 1, padded_hw[1] - g.shape[3])))
        return _correlate(gp, wf, 1)
    return _scatter_input(g, w, stride, padded_hw)


def _check_conv_args(x: Tensor, w: Tensor, in_axis: int, stride: int, padding: int, name: str) -> None:
    if w.data.ndim != 4:
        raise ShapeError(f"{name}: weight must be rank 4, got {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(
            f"{name}: input channels {x.shape[1]} (input shape {x.shape}) do not match "
            f"weight shape {w.shape}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"{name}: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.dtype != w.dtype:
        raise TypeError(f"{name}: dtype mismatch {x.dtype} vs {w.dtype}")


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), keepdims=True)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``weight`` is ``[Cout, Cin, kh, kw]``; ``bias`` is ``[1, Cout, 1, 1]`` or ``None``.
    """
    _check_conv_args(x, weight, 1, stride, padding, "conv2d")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = _pad_zero(x.data, padding)
    out = _correlate(xp, weight.data, stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    wd = weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = None
        if x.requires_grad:
            gxp = _input_grad(g, wd, stride, xp.shape[2:])
            gx = gxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
        gw = _weight_grad(xp, g, (kh, kw), stride) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, _bias_grad(g).reshape(bias.shape)

    return make_op(out, parents, backward, "conv2d")


def conv2d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution: the input-gradient operator of :func:`conv2d`.

    ``weight`` is ``[Cin, Cout, kh, kw]``; output size is
    ``(H - 1) * stride - 2 * padding + kh + output_padding``. A strided
    :func:`conv2d` drops ``(H + 2p - k) % stride`` trailing rows and columns;
    passing that as ``output_padding`` restores its input size, which makes
    the pair exact adjoints.
    """
    _check_conv_args(x, weight, 0, stride, padding, "conv2d_transpose")
    if not 0 <= output_padding < stride:
        raise ValueError(f"conv2d_transpose: output_padding must lie in [0, stride), got {output_padding}")
    n, cin, h, w = x.shape
    kh, kw = weight.shape[2:]
    full = (stride * (h - 1) + kh, stride * (w - 1) + kw)
    out_hw = (full[0] - 2 * padding + output_padding, full[1] - 2 * padding + output_padding)
    if out_hw[0] < 1 or out_hw[1] < 1:
        raise ShapeError(f"conv2d_transpose: padding {padding} leaves an empty output")
    outp = _scatter_input(x.data, weight.data, stride, full)
    if output_padding:
        outp = np.pad(outp, ((0, 0), (0, 0), (0, output_padding), (0, output_padding)))
    out = outp[:, :, padding : padding + out_hw[0], padding : padding + out_hw[1]]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    else:
        out = np.ascontiguousarray(out)
    wd = weight.data
    xd = x.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        # rows past the scatter extent only ever received zeros; the strided
        # window count below still comes out as exactly H because output_padding < stride
        gp = _pad_zero(g, padding)
        gx = _correlate(gp, wd, stride) if x.requires_grad else None
        gw = _weight_grad(gp, xd, (kh, kw), stride) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, _bias_grad(g).reshape(bias.shape)

    return make_op(out, parents, backward, "conv2d_transpose")
