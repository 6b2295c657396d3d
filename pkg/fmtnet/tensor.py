"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op builds its output with `Tensor.from_op`, recording the parent
tensors and a backward rule mapping the output gradient to one gradient per parent.
`backward` orders the recorded graph topologically (a `Tape`) and runs every rule exactly
once, in reverse.

Reductions accumulate strictly left to right (`numpy.cumsum`), conv2d accumulates kernel
taps in (c_in, ky, kx) order and matmul over the inner index in increasing order, so
plain loop oracles written in the same order reproduce the results bit for bit.
"""
from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from fmtnet.errors import InvalidArgument

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
TensorLike = Union["Tensor", float, int, np.ndarray]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops evaluated inside the block record nothing."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Optional[BackwardRule] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], rule: BackwardRule, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._rule = rule if tracked else None
        return out

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
    def is_leaf(self) -> bool:
        return self._rule is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: TensorLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: TensorLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: TensorLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: TensorLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: TensorLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: TensorLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: TensorLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tape:
    """Topologically ordered nodes of one graph: inputs precede the ops using them."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate dLoss/dLeaf into the `grad` buffer of every requires_grad leaf."""
    if loss.size != 1:
        raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    if not loss.requires_grad:
        return tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, parent_grad in zip(node._parents, node._rule(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad
    return tape


# --- elementwise ---

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidArgument(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    return Tensor.from_op(
        a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def neg(x: Tensor) -> Tensor:
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at exactly zero is taken as 0."""
    out = np.sqrt(x.data)

    def rule(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor.from_op(out, (x,), rule, "sqrt")


def abs_(x: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return Tensor.from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Identity inside [lo, hi]; gradient 1 strictly inside, 0 at and beyond the bounds."""
    inside = (x.data > lo) & (x.data < hi)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def sin(x: Tensor) -> Tensor:
    return Tensor.from_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x: Tensor) -> Tensor:
    return Tensor.from_op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def arcsin(x: Tensor) -> Tensor:
    """Gradient is 0 where |x| >= 1 (the clipped region upstream)."""
    def rule(g):
        inner = 1.0 - x.data * x.data
        ok = inner > 0
        return (np.where(ok, g / np.sqrt(np.where(ok, inner, 1.0)), 0.0),)

    return Tensor.from_op(np.arcsin(x.data), (x,), rule, "arcsin")


def arccos(x: Tensor) -> Tensor:
    def rule(g):
        inner = 1.0 - x.data * x.data
        ok = inner > 0
        return (np.where(ok, -g / np.sqrt(np.where(ok, inner, 1.0)), 0.0),)

    return Tensor.from_op(np.arccos(x.data), (x,), rule, "arccos")


# --- reductions ---

def _ordered_sum(data: np.ndarray, axis: Optional[int]) -> np.ndarray:
    if axis is None:
        flat = data.reshape(-1)
        if flat.size == 0:
            return np.array(0.0)
        return np.array(np.cumsum(flat)[-1])
    return np.take(np.cumsum(data, axis=axis), -1, axis=axis)


def sum_(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum with plain left-to-right accumulation."""
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise InvalidArgument(f"sum: axis {axis} out of range for shape {x.shape}")

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor.from_op(_ordered_sum(x.data, axis), (x,), rule, "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return div(sum_(x, axis), float(count))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor.from_op(
        out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax",
    )


def log_softmax(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Tensor.from_op(
        out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax",
    )


# --- linear algebra and shape ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k]@[k,n] or [m,k]@[k]; accumulates over k in increasing order."""
    vector = b.ndim == 1
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise InvalidArgument(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    bm = b.data.reshape(b.shape[0], -1)
    out = np.zeros((a.shape[0], bm.shape[1]))
    for k in range(a.shape[1]):
        out += a.data[:, k:k + 1] * bm[k:k + 1, :]

    def rule(g):
        gm = g.reshape(a.shape[0], -1)
        return (gm @ bm.T, (a.data.T @ gm).reshape(b.shape))

    return Tensor.from_op(out.reshape(-1) if vector else out, (a, b), rule, "matmul")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise InvalidArgument(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor.from_op(x.data[index], (x,), rule, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidArgument(f"concat: {exc}")
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, offsets, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidArgument(f"stack: {exc}")
    return Tensor.from_op(
        out, tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack",
    )


def pad(x: Tensor, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    pad_width = tuple(tuple(p) for p in pad_width)
    window = tuple(slice(lo, lo + size) for (lo, _), size in zip(pad_width, x.shape))
    return Tensor.from_op(np.pad(x.data, pad_width), (x,), lambda g: (g[window],), "pad")


# --- image ops ---

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[C_in,H,W] with kernel[C_out,C_in,kH,kW] plus bias[C_out]."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise InvalidArgument(f"conv2d: expected [C,H,W] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise InvalidArgument(f"conv2d: kernel expects {c_in} input channels, input has {x.shape[0]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgument(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise InvalidArgument(f"conv2d: invalid stride {stride} / padding {padding}")
    if bias.shape != (c_out,):
        raise InvalidArgument(f"conv2d: bias shape {bias.shape} does not match {c_out} outputs")
    h, w = x.shape[1:]
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise InvalidArgument(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    k = kernel.data

    def window(ky: int, kx: int) -> tuple[slice, slice]:
        return (slice(ky, ky + stride * (oh - 1) + 1, stride), slice(kx, kx + stride * (ow - 1) + 1, stride))

    acc = np.zeros((c_out, oh, ow))
    for ci in range(c_in):
        for ky in range(kh):
            for kx in range(kw):
                rows, cols = window(ky, kx)
                acc += k[:, ci, ky, kx][:, None, None] * xp[ci, rows, cols][None]
    out = acc + bias.data[:, None, None]

    def rule(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for ky in range(kh):
            for kx in range(kw):
                rows, cols = window(ky, kx)
                gk[:, :, ky, kx] = np.einsum("ohw,chw->oc", g, xp[:, rows, cols])
                gxp[:, rows, cols] += np.einsum("oc,ohw->chw", k[:, :, ky, kx], g)
        gx = gxp[:, padding:padding + h, padding:padding + w]
        return gx, gk, g.sum(axis=(1, 2))

    return Tensor.from_op(out, (x, kernel, bias), rule, "conv2d")


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride = kernel)."""
    c, h, w = x.shape
    if kernel < 1 or h % kernel or w % kernel:
        raise InvalidArgument(f"avg_pool2d: kernel {kernel} does not tile {h}x{w}")
    out = x.data.reshape(c, h // kernel, kernel, w // kernel, kernel).mean(axis=(2, 4))
    area = float(kernel * kernel)
    return Tensor.from_op(
        out, (x,), lambda g: (np.repeat(np.repeat(g, kernel, axis=1), kernel, axis=2) / area,), "avg_pool2d",
    )


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    return Tensor.from_op(
        out, (x,), lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),), "upsample_nearest",
    )


class RunningStats:
    """Batchnorm running mean/variance, updated in train mode only."""

    def __init__(self, size: int, momentum: float = BN_MOMENTUM):
        self.mean = np.zeros(size)
        self.var = np.ones(size)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * batch_var


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Normalize x[C,H,W] per channel over space, or x[F] over its single feature group.

    Train mode uses the (biased) statistics of the input and updates `stats`; eval mode
    uses `stats`.
    """
    if eps <= 0:
        raise InvalidArgument("batchnorm: epsilon must be positive")
    if x.ndim == 3:
        axes = (1, 2)
        param_view = (slice(None), None, None)
        stat_view = (slice(None), None, None)
        param_axes = (1, 2)
    elif x.ndim == 1:
        axes = (0,)
        param_view = (slice(None),)
        stat_view = (slice(None),)
        param_axes = None
    else:
        raise InvalidArgument(f"batchnorm: expected [C,H,W] or [F] input, got {x.shape}")
    if gamma.shape != beta.shape or gamma.shape[0] != x.shape[0]:
        raise InvalidArgument(f"batchnorm: gamma/beta shape {gamma.shape} does not match {x.shape}")

    g_b = gamma.data[param_view]
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
        stats.update(mu.reshape(-1), var.reshape(-1))
    else:
        mu = stats.mean[stat_view]
        var = stats.var[stat_view]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = g_b * xhat + beta.data[param_view]
    count = float(np.prod([x.shape[a] for a in axes]))

    def rule(g):
        dxhat = g * g_b
        if training:
            dx = inv_std / count * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        if param_axes is None:
            return dx, g * xhat, g
        return dx, (g * xhat).sum(axis=param_axes), g.sum(axis=param_axes)

    return Tensor.from_op(out, (x, gamma, beta), rule, "batchnorm")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def take_pixels(x: Tensor, source: np.ndarray) -> Tensor:
    """out[:, q] = x[:, source[q]] for source[q] >= 0, else 0; source is [H,W] of flat indices."""
    c = x.shape[0]
    if source.shape != x.shape[1:]:
        raise InvalidArgument(f"take_pixels: source map {source.shape} does not match {x.shape}")
    flat_src = source.reshape(-1)
    valid = flat_src >= 0
    xf = x.data.reshape(c, -1)
    out = np.zeros_like(xf)
    out[:, valid] = xf[:, flat_src[valid]]

    def rule(g):
        gx = np.zeros_like(xf)
        np.add.at(gx, (slice(None), flat_src[valid]), g.reshape(c, -1)[:, valid])
        return (gx.reshape(x.shape),)

    return Tensor.from_op(out.reshape(x.shape), (x,), rule, "take_pixels")
