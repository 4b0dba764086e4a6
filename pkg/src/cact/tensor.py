"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a fresh :class:`Tensor`; inputs are never mutated.
When any input requires a gradient (and recording is enabled), the result
remembers its parents and a closure mapping the upstream gradient onto them.
:func:`backward` walks that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError

_grad_enabled = True
_mac_counters: list["MacCounter"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class MacCounter:
    """Accumulates multiply-accumulate counts of conv2d and dense calls."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _record_macs(n: int) -> None:
    for counter in _mac_counters:
        counter.add(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that influences ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so call
    ``zero_grad`` between optimization steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard operands differ in shape: {a.shape} vs {b.shape}")
    return mul(a, b)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def log2(a: Tensor) -> Tensor:
    return _result(np.log2(a.data), (a,), lambda g: (g / (a.data * np.log(2.0)),), "log2")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return _result(np.maximum(a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def softmax(a: Tensor, axis=-1) -> Tensor:
    """Softmax over ``axis``; a tuple of axes normalizes over their product."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), bw, "getitem")


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ContractError("concat needs at least one input")
    ndim = inputs[0].ndim
    axis = axis % ndim
    for t in inputs[1:]:
        if t.ndim != ndim:
            raise DimensionError(f"concat rank mismatch: {inputs[0].shape} vs {t.shape}")
        bad = [ax for ax in range(ndim) if ax != axis and t.shape[ax] != inputs[0].shape[ax]]
        if bad:
            raise DimensionError(
                f"concat along axis {axis}: axes {bad} disagree ({inputs[0].shape} vs {t.shape})"
            )
    bounds = np.cumsum([t.shape[axis] for t in inputs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in inputs], axis=axis), inputs, bw, "concat")


def stack_rows(inputs: Iterable[Tensor]) -> Tensor:
    """Concatenate along a new leading axis."""
    return concat([reshape(t, (1,) + t.shape) for t in inputs], axis=0)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs [n,k]@[k,m]; got {a.shape} @ {b.shape}")
    _record_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer: ``x[B,D] @ weight[D,C] + bias[C]``."""
    if x.ndim != 2:
        raise DimensionError(f"dense input must be [B,D], got {x.shape}")
    if weight.shape[0] != x.shape[1]:
        raise DimensionError(
            f"dense: input axis 1 ({x.shape[1]}) != weight axis 0 ({weight.shape[0]})"
        )
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over ``x[B,C,H,W]`` with ``weight[K,C,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input axis 1 (channels={C}) != weight axis 1 ({Cw})")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input axes 2,3 ({H + 2 * padding}x{W + 2 * padding})"
        )
    if bias is not None and bias.shape != (K,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({K},)")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    _record_macs(B * K * Ho * Wo * C * kh * kw)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(K, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, K)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of ``x[B,C,H,W]``.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm needs [B,C,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} != ({C},)")
    axes = (0, 2, 3)
    bshape = (1, C, 1, 1)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise DegenerateBatchError("batch_norm in training mode needs B*H*W >= 2 per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)

        def bw(g):
            dxhat = g * gamma.data.reshape(bshape)
            gx = (invstd.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        invstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * invstd.reshape(bshape)

        def bw(g):
            gx = g * (gamma.data * invstd).reshape(bshape)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return _result(out, (x, gamma, beta), bw, "batch_norm")


POOL_KINDS = ("global_avg", "global_max", "avg3x3")


def _box3x3(a: np.ndarray) -> np.ndarray:
    H, W = a.shape[2:]
    p = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(a)
    for i in range(3):
        for j in range(3):
            out += p[:, :, i : i + H, j : j + W]
    return out / 9.0


def pool(x: Tensor, kind: str) -> Tensor:
    """Global average/max pooling to ``[B,C,1,1]`` or a 3x3 stride-1 zero-padded mean."""
    if x.ndim != 4:
        raise DimensionError(f"pool needs [B,C,H,W], got {x.shape}")
    if kind == "global_avg":
        return tmean(x, axis=(2, 3), keepdims=True)
    if kind == "global_max":
        m = x.data.max(axis=(2, 3), keepdims=True)
        mask = x.data == m
        share = mask / mask.sum(axis=(2, 3), keepdims=True)
        return _result(m, (x,), lambda g: (g * share,), "global_max")
    if kind == "avg3x3":
        # zero-padded 3x3 box filter is self-adjoint
        return _result(_box3x3(x.data), (x,), lambda g: (_box3x3(g),), "avg3x3")
    raise ContractError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")
