"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` orders the reachable graph
topologically (that order is the tape) and walks it in reverse once.

Shapes are checked eagerly. The only implicit broadcasting is between a tensor
and a scalar (a python number or a 0-d tensor); everything else has to go
through ``broadcast_to``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, DomainError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CE_CLAMP = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            return mul(self, pow(other, -1.0))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def wrap(x) -> Tensor:
    """Constant tensor over ``x`` without copying when it is already float64."""
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.name = None
    return out


def _unscalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; callers zero them
    between optimisation steps.
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaves own their grad array; callers may mutate it
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return Tensor._node(a.data + b.data, (a, b), lambda g: (_unscalar(g, a.shape), _unscalar(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return Tensor._node(a.data - b.data, (a, b), lambda g: (_unscalar(g, a.shape), _unscalar(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return Tensor._node(
        a.data * b.data,
        (a, b),
        lambda g: (_unscalar(g * b.data, a.shape), _unscalar(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._node(a.data * c, (a,), lambda g: (g * c,))


def pow(a: Tensor, p: float) -> Tensor:
    p = float(p)
    x = a.data
    if p < 0 and np.any(x == 0):
        raise DomainError("pow: negative exponent of zero")
    if p != int(p) and np.any(x < 0):
        raise DomainError("pow: fractional exponent of negative value")
    out = x**p
    return Tensor._node(out, (a,), lambda g: (g * p * x ** (p - 1.0),))


def sqrt(a: Tensor) -> Tensor:
    """Square root with subgradient 0 at 0."""
    x = a.data
    if np.any(x < 0):
        raise DomainError(f"sqrt of negative value (min {x.min()})")
    out = np.sqrt(x)

    def _bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._node(out, (a,), _bw)


def safe_reciprocal(a: Tensor) -> Tensor:
    """1/x where x != 0, else 0 (gradient likewise 0 there)."""
    x = a.data
    nz = x != 0
    safe = np.where(nz, x, 1.0)
    out = np.where(nz, 1.0 / safe, 0.0)
    return Tensor._node(out, (a,), lambda g: (np.where(nz, -g / (safe * safe), 0.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return Tensor._node(np.log(x), (a,), lambda g: (g / x,))


def relu(a: Tensor) -> Tensor:
    out = _kernels.relu_forward(np.ascontiguousarray(a.data))
    return Tensor._node(out, (a,), lambda g: (_kernels.relu_backward(np.ascontiguousarray(g), out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._node(s, (a,), _bw)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._node(np.asarray(out), (a,), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return Tensor._node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._node(out, (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; gradient sums over the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {src} -> {shape}") from exc

    def _bw(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return Tensor._node(out, (a,), _bw)


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis {axis} of size {n}")
    out = np.take(a.data, idx, axis=axis)

    def _bw(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._node(out, (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._node(out, tensors, _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Tensor._node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[B, in] @ weight[out, in].T + bias[out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        grads = [g @ weight.data if x.requires_grad else None, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._node(out, parents, _bw)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    cols = _kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, padding, Ho, Wo)
    return cols, Ho, Wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input {x.shape} has {C} channels, weight {weight.shape} expects {Cw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs {O} filters")

    cols, Ho, Wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(O, -1)
    out = (w2 @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            dx = _kernels.col2im(dcols, H, W, stride, padding)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._node(out, parents, _bw)


def grouped_conv2d(
    x: Tensor,
    weights: Sequence[Tensor],
    gathers: Sequence[Sequence[int]],
    stride: int = 1,
    padding: int = 0,
    biases: Sequence[Tensor | None] | None = None,
) -> Tensor:
    """Grouped convolution where group p reads input channels ``gathers[p]``.

    Gather lists may overlap; output channels are the per-group outputs
    concatenated in group order.
    """
    if len(weights) != len(gathers):
        raise DimensionError(f"grouped_conv2d: {len(weights)} weights vs {len(gathers)} gather lists")
    if not weights:
        raise DimensionError("grouped_conv2d: no groups")
    C = x.shape[1]
    outs = []
    for p, (w, idx) in enumerate(zip(weights, gathers)):
        idx = list(idx)
        if any(i < 0 or i >= C for i in idx):
            raise IndexError(f"grouped_conv2d: group {p} gathers {idx} from {C} channels")
        if w.shape[1] != len(idx):
            raise DimensionError(f"grouped_conv2d: group {p} weight {w.shape} vs {len(idx)} gathered channels")
        b = biases[p] if biases is not None else None
        outs.append(conv2d(take(x, idx, axis=1), w, b, stride, padding))
    return outs[0] if len(outs) == 1 else concat(outs, axis=1)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling without padding; ties go to the first position in the window."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if H < kernel or W < kernel or stride < 1:
        raise DimensionError(f"maxpool2d: kernel {kernel} / stride {stride} invalid for input {x.shape}")
    Ho, Wo = (H - kernel) // stride + 1, (W - kernel) // stride + 1
    out, arg = _kernels.maxpool_forward(np.ascontiguousarray(x.data), kernel, stride, Ho, Wo)

    def _bw(g):
        return (_kernels.maxpool_backward(np.ascontiguousarray(g), arg, kernel, stride, H, W),)

    return Tensor._node(out, (x,), _bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    In training mode with ``update_stats`` the running buffers are updated in
    place (unbiased variance, like the common frameworks).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    shape = x.shape
    B, C = shape[0], shape[1]
    x3 = np.ascontiguousarray(x.data).reshape(B, C, -1)
    M = x3.shape[0] * x3.shape[2]
    if training:
        mean, var = _kernels.channel_moments(x3)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (M / max(M - 1, 1))
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat, out = _kernels.bn_apply(x3, mean, invstd, gamma.data, beta.data)

    def _bw(g):
        g3 = np.ascontiguousarray(g).reshape(xhat.shape)
        dgamma, dbeta = _kernels.bn_grad_sums(g3, xhat)
        dx = None
        if x.requires_grad:
            k = gamma.data * invstd
            if training:
                dx = _kernels.bn_input_grad(g3, xhat, k, dbeta / M, dgamma / M)
            else:
                dx = _kernels.bn_input_grad(g3, xhat, k, np.zeros(C), np.zeros(C))
            dx = dx.reshape(shape)
        return dx, dgamma, dbeta

    return Tensor._node(out.reshape(shape), (x, gamma, beta), _bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; per-sample log-probabilities clamped at log(1e-12)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    logp = z[rows, labels] - lse
    floor = np.log(CE_CLAMP)
    clamped = logp < floor
    B = labels.size
    loss = -np.where(clamped, floor, logp).mean()

    def _bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        p[clamped] = 0.0
        return (p * (g / B),)

    return Tensor._node(np.asarray(loss), (logits,), _bw)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))
