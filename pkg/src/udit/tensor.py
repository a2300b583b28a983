"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major :class:`numpy.ndarray`. Ops that touch a tensor
with ``requires_grad`` append a :class:`Node` to the execution record; calling
:func:`backward` on a scalar replays the reachable part of that record once, in
reverse execution order.

Two precision modes exist: ``float32`` (working default) and ``float64`` (used
by the gradient checks). Mixing them inside one graph is rejected.

FLOP conventions used by :func:`trace_flops` (and mirrored by
:mod:`udit.analysis`):

* matmul / linear / channel_linear: 2 FLOPs per multiply-add, bias ignored
* depthwise_conv2d: 2 * k * k FLOPs per output element
* softmax: 5 FLOPs per element
* layer_norm: 8 FLOPs per element
* every other op: 0
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "FlopTally",
    "DIFFERENTIABLE_OPS",
    "precision",
    "get_dtype",
    "no_grad",
    "is_grad_enabled",
    "trace_flops",
    "tensor",
    "zeros",
    "backward",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True
_seq = itertools.count()
_tally: FlopTally | None = None

#: Name of every op that records a backward rule.
DIFFERENTIABLE_OPS: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn

    return deco


@contextmanager
def precision(mode: str) -> Iterator[None]:
    """Set the default dtype (``"float32"`` or ``"float64"``) inside the block."""
    global _default_dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    prev = _default_dtype
    _default_dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _default_dtype = prev


def get_dtype() -> type:
    return _default_dtype


@contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass
class FlopTally:
    by_op: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, flops: int) -> None:
        self.by_op[op] += int(flops)


@contextmanager
def trace_flops() -> Iterator[FlopTally]:
    """Tally FLOPs of every op executed inside the block."""
    global _tally
    prev = _tally
    _tally = FlopTally()
    try:
        yield _tally
    finally:
        _tally = prev


def _count(op: str, flops: int) -> None:
    if _tally is not None:
        _tally.add(op, flops)


class Node:
    """One executed op: its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "seq", "grad")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, seq: int):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = seq
        self.grad = None

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    __array_priority__ = 100  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else _default_dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed precision in one graph: {dt} vs {t.dtype}")


def _make(data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn, next(_seq))
    return out


class Tape:
    """Ordered record of executed ops that contribute to ``loss``.

    ``nodes`` is in execution order; :func:`backward` walks it in reverse.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = Tape.from_loss(loss)
    loss._node.grad = seed
    for node in reversed(tape.nodes):
        g = node.grad
        node.grad = None
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t._node is not None:
                t._node.grad = gt if t._node.grad is None else t._node.grad + gt
            else:
                if gt.shape != t.shape:
                    raise RuntimeError(f"{node.op}: grad shape {gt.shape} != leaf shape {t.shape}")
                t.grad = gt.copy() if t.grad is None else t.grad + gt


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# elementwise arithmetic


@_register("add")
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


@_register("sub")
def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


@_register("mul")
def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


@_register("scale")
def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data * x.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),), "scale")


@_register("exp")
def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


@_register("clamp_max")
def clamp_max(x: Tensor, limit: float) -> Tensor:
    mask = x.data <= limit
    return _make(np.minimum(x.data, x.dtype.type(limit)), (x,), lambda g: (g * mask,), "clamp_max")


@_register("silu")
def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def bw(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _make(xd * sig, (x,), bw, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


@_register("gelu")
def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    x2 = xd * xd  # explicit products; ndarray ** is an order of magnitude slower
    th = np.tanh(c * (xd + xd.dtype.type(0.044715) * x2 * xd))
    y = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + xd.dtype.type(3 * 0.044715) * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(y, (x,), bw, "gelu")


# shape ops


@_register("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


@_register("transpose")
def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


@_register("sum")
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


@_register("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


@_register("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_dtypes(*tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


@_register("take")
def take(x: Tensor, index) -> Tensor:
    """Basic-slicing view of ``x`` (``index`` as accepted by ``ndarray.__getitem__``)."""
    shape, dt = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        out[index] = g
        return (out,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), bw, "take")


def chunk(x: Tensor, n: int, axis: int = 0) -> list[Tensor]:
    ax = axis % x.ndim
    if x.shape[ax] % n:
        raise ValueError(f"chunk: extent {x.shape[ax]} on axis {axis} not divisible by {n}")
    step = x.shape[ax] // n
    out = []
    for i in range(n):
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(i * step, (i + 1) * step)
        out.append(take(x, tuple(idx)))
    return out


# contractions


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch extents not broadcastable {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _count("matmul", 2 * m * k * n * int(np.prod(batch, dtype=np.int64)))

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), bw, "matmul")


@_register("linear")
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    _check_dtypes(x, weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    rows = int(np.prod(x.shape[:-1], dtype=np.int64))
    _count("linear", 2 * rows * weight.shape[0] * weight.shape[1])
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd) if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(y, inputs, bw, "linear")


@_register("channel_linear")
def channel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: mixes channels of an (B, C, H, W) map; ``weight`` is (out, in)."""
    _check_dtypes(x, weight)
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel_linear: input {x.shape} does not match weight {weight.shape}")
    b, c, h, w = x.shape
    out_c = weight.shape[0]
    xd = x.data.reshape(b, c, h * w)
    wd = weight.data
    _count("channel_linear", 2 * b * h * w * out_c * c)
    y = np.matmul(wd, xd)
    if bias is not None:
        y += bias.data[:, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g3 = g.reshape(b, out_c, h * w)
        gx = np.matmul(wd.T, g3).reshape(b, c, h, w) if x.requires_grad else None
        gw = np.tensordot(g3, xd, axes=([0, 2], [0, 2])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return _make(y.reshape(b, out_c, h, w), inputs, bw, "channel_linear")


# normalisation / attention primitives


@_register("softmax")
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    _count("softmax", 5 * x.size)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


@_register("layer_norm")
def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6, axis: int = 1) -> Tensor:
    """Normalise over ``axis`` (the channel axis for (B, C, H, W) maps)."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    ax = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    _count("layer_norm", 8 * x.size)
    y = xhat
    if gain is not None:
        y = y * gain.data.reshape(bshape)
    if bias is not None:
        y = y + bias.data.reshape(bshape)
    inputs = [x]
    if gain is not None:
        inputs.append(gain)
    if bias is not None:
        inputs.append(bias)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        gh = g * gain.data.reshape(bshape) if gain is not None else g
        gx = rstd * (gh - gh.mean(axis=ax, keepdims=True) - xhat * (gh * xhat).mean(axis=ax, keepdims=True))
        out = [gx]
        if gain is not None:
            out.append((g * xhat).sum(axis=red))
        if bias is not None:
            out.append(g.sum(axis=red))
        return tuple(out)

    return _make(y, tuple(inputs), bw, "layer_norm")


@_register("l2_normalize")
def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    small = norm < eps
    denom = np.where(small, xd.dtype.type(eps), norm)
    y = xd / denom

    def bw(g):
        proj = np.where(small, 0.0, (g * y).sum(axis=axis, keepdims=True))
        return ((g - y * proj) / denom,)

    return _make(y, (x,), bw, "l2_normalize")


@_register("rotate_pairs")
def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (2i, 2i+1) of the last axis by angles given as cos/sin.

    ``cos`` and ``sin`` broadcast against ``x[..., ::2]``.
    """
    xd = x.data
    cos = cos.astype(xd.dtype, copy=False)
    sin = sin.astype(xd.dtype, copy=False)
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    y = np.empty_like(xd)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _make(y, (x,), bw, "rotate_pairs")


@_register("depthwise_conv2d")
def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 2-D cross-correlation with zero 'same' padding.

    ``x`` is (B, C, H, W), ``kernel`` is (C, 1, k, k) with odd ``k``.
    """
    _check_dtypes(x, kernel)
    if x.ndim != 4:
        raise ValueError(f"depthwise_conv2d: expected (B, C, H, W), got {x.shape}")
    c, one, k, k2 = kernel.shape
    if one != 1 or k != k2 or c != x.shape[1]:
        raise ValueError(f"depthwise_conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ValueError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    b, _, h, w = x.shape
    p = k // 2
    # channel-last inside the op: tap products then broadcast over a contiguous channel axis
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + w, :] = x.data.transpose(0, 2, 3, 1)
    kt = np.ascontiguousarray(kernel.data[:, 0].transpose(1, 2, 0))
    _count("depthwise_conv2d", 2 * k * k * x.size)
    yl = np.zeros((b, h, w, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            yl += xp[:, i : i + h, j : j + w, :] * kt[i, j]
    y = np.ascontiguousarray(yl.transpose(0, 3, 1, 2))

    def bw(g):
        gl = g.transpose(0, 2, 3, 1)
        gx = gk = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gp[:, i : i + h, j : j + w, :] += gl * kt[i, j]
            gx = np.ascontiguousarray(gp[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gl = np.ascontiguousarray(gl)
            gk = np.empty_like(kernel.data)
            for i in range(k):
                for j in range(k):
                    gk[:, 0, i, j] = np.einsum("bhwc,bhwc->c", gl, xp[:, i : i + h, j : j + w, :])
        return gx, gk

    return _make(y, (x, kernel), bw, "depthwise_conv2d")


# space <-> batch permutations


def _s2b(a: np.ndarray, s: int) -> np.ndarray:
    b, c, h, w = a.shape
    a = a.reshape(b, c, h // s, s, w // s, s).transpose(0, 3, 5, 1, 2, 4)
    return np.ascontiguousarray(a).reshape(b * s * s, c, h // s, w // s)


def _b2s(a: np.ndarray, s: int) -> np.ndarray:
    bs, c, h, w = a.shape
    b = bs // (s * s)
    a = a.reshape(b, s, s, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    return np.ascontiguousarray(a).reshape(b, c, h * s, w * s)


@_register("space_to_batch")
def space_to_batch(x: Tensor, s: int) -> Tensor:
    """Fold the s*s spatial phases into the batch axis.

    Output batch ``b*s*s + dy*s + dx`` holds ``x[b, :, dy::s, dx::s]``.
    """
    if x.ndim != 4:
        raise ValueError(f"space_to_batch: expected (B, C, H, W), got {x.shape}")
    if s < 1 or x.shape[2] % s or x.shape[3] % s:
        raise ValueError(f"space_to_batch: factor {s} does not divide spatial extents {x.shape[2:]}")
    if s == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "space_to_batch")
    return _make(_s2b(x.data, s), (x,), lambda g: (_b2s(g, s),), "space_to_batch")


@_register("batch_to_space")
def batch_to_space(x: Tensor, s: int) -> Tensor:
    """Exact inverse of :func:`space_to_batch`."""
    if x.ndim != 4:
        raise ValueError(f"batch_to_space: expected (B, C, H, W), got {x.shape}")
    if s < 1 or x.shape[0] % (s * s):
        raise ValueError(f"batch_to_space: batch {x.shape[0]} not divisible by {s * s}")
    if s == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "batch_to_space")
    return _make(_b2s(x.data, s), (x,), lambda g: (_s2b(g, s),), "batch_to_space")


# lookups and losses


@_register("embedding")
def embedding(table: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for table with {table.shape[0]} rows")
    shape, dt = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), bw, "embedding")


@_register("mse_loss")
def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred)
    _check_dtypes(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return _make(np.asarray((diff * diff).mean()), (pred, target), bw, "mse_loss")
