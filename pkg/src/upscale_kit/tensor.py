"""Dense-tensor numerics with reverse-mode gradients for a fixed op set.

Tensors wrap a row-major numpy buffer (float32 for training, float64 for
gradient-check oracles). Every operation that touches a tensor requiring
gradients records an `OpNode` on the result; `backward()` topologically
orders the nodes reachable from a scalar loss and visits each exactly once,
accumulating gradients into the `.grad` buffer of the participating leaves.

The op set is fixed on purpose: it is exactly what the reference
transformer needs (no general autodiff, no views with overlapping writes).
Tensors are immutable after construction except for explicit in-place
optimizer updates on leaves; read-only sharing across threads is safe, but
a forward+backward pass must stay on one thread.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError, TokenIdError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class OpNode:
    """One recorded operation: inputs, op kind, and the gradient rule.

    `backward_fn` maps the output gradient to a tuple of input gradients
    (None for inputs that do not require gradients).
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense row-major tensor with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # float32 by default; float64 arrays pass through for oracle work
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: OpNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _as_operand(x, like_dtype) -> Tensor:
    """Wrap raw arrays/scalars as constant tensors of a matching dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype != like_dtype:
        arr = arr.astype(like_dtype)
    return Tensor(arr)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.dtype.name} vs {b.dtype.name}")


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    out._node = OpNode(op, inputs, backward_fn) if requires else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_operand(b, a.dtype)
    _check_same_dtype(a, b, "add")
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("add", data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_operand(b, a.dtype)
    _check_same_dtype(a, b, "mul")
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, np.asarray(s, dtype=a.dtype))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    old = a.shape

    def bw(g):
        return (g.reshape(old) if a.requires_grad else None,)

    return _result("reshape", data, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)) if a.requires_grad else None,)

    return _result("transpose", data, (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.data.ndim))
    data = np.ascontiguousarray(a.data[idx])

    def bw(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _result("narrow", data, (a,), bw)


def repeat_interleave(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat every entry along `axis` `repeats` times (GQA head sharing)."""
    if repeats < 1:
        raise ParameterError(f"repeat_interleave: repeats must be >= 1, got {repeats}")
    axis = axis % a.data.ndim
    data = np.repeat(a.data, repeats, axis=axis)
    n = a.shape[axis]

    def bw(g):
        if not a.requires_grad:
            return (None,)
        shp = g.shape[:axis] + (n, repeats) + g.shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _result("repeat_interleave", data, (a,), bw)


def rotate_half(a: Tensor) -> Tensor:
    """Map (x1, x2) halves of the last axis to (-x2, x1)."""
    d = a.shape[-1]
    if d % 2 != 0:
        raise DimensionError(f"rotate_half: last axis must be even, got {d}")
    h = d // 2
    data = np.concatenate([-a.data[..., h:], a.data[..., :h]], axis=-1)

    def bw(g):
        if not a.requires_grad:
            return (None,)
        return (np.concatenate([g[..., h:], -g[..., :h]], axis=-1),)

    return _result("rotate_half", data, (a,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    if weight.data.ndim != 2:
        raise DimensionError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise TokenIdError(
            f"embedding: ids must lie in [0, {weight.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]")
    data = weight.data[ids]

    def bw(g):
        if not weight.requires_grad:
            return (None,)
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result("embedding", data, (weight,), bw)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def bw(g):
        if not a.requires_grad:
            return (None,)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result("sum_all", data, (a,), bw)


# ---------------------------------------------------------------------------
# numeric kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b) -> Tensor:
    """Matrix product; batched when both operands share leading dims, or
    with a shared 2-D right operand (linear layers)."""
    a = _as_tensor(a)
    b = _as_operand(b, a.dtype)
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    b_shared = b.data.ndim == 2 and a.data.ndim > 2
    if not b_shared and a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul: rank mismatch: {a.shape} x {b.shape}")
    if not b_shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b_shared or a.data.ndim == 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result("matmul", data, (a, b), bw)


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if a.data.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax: empty last axis in shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if not a.requires_grad:
            return (None,)
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _result("softmax", data, (a,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """y = x / sqrt(mean(x^2, last) + eps) * weight."""
    if eps <= 0:
        raise ParameterError(f"rms_norm: eps must be positive, got {eps}")
    if weight.data.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"rms_norm: trailing dim {x.shape} incompatible with weight {weight.shape}")
    _check_same_dtype(x, weight, "rms_norm")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    data = x.data * inv * weight.data

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gw_dot = (g * weight.data * x.data).sum(axis=-1, keepdims=True)
            gx = g * weight.data * inv - x.data * (inv ** 3) * gw_dot / d
        if weight.requires_grad:
            red = tuple(range(x.data.ndim - 1))
            gw = (g * x.data * inv).sum(axis=red)
        return gx, gw

    return _result("rms_norm", data, (x, weight), bw)


def silu(x: Tensor) -> Tensor:
    """y = x * sigmoid(x), computed without overflow for large |x|."""
    sig = _sigmoid(x.data)
    data = x.data * sig

    def bw(g):
        if not x.requires_grad:
            return (None,)
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return _result("silu", data, (x,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  ignore_id: int | None = None) -> Tensor:
    """Mean cross-entropy in nats over non-ignored positions.

    `logits` is (N, V); `targets` is (N,) integer class ids. Rows whose
    target equals `ignore_id` contribute nothing to loss or gradient.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}")
    n, v = logits.shape
    keep = np.ones(n, dtype=bool) if ignore_id is None else targets != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise ParameterError("cross_entropy: every position is padding")
    safe_targets = np.where(keep, targets, 0)
    if safe_targets.min() < 0 or safe_targets.max() >= v:
        raise TokenIdError(f"cross_entropy: target id out of range [0, {v})")

    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = np.log(e.sum(axis=-1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), safe_targets]
    data = np.asarray((nll * keep).sum() / count, dtype=logits.dtype)

    def bw(g):
        if not logits.requires_grad:
            return (None,)
        probs = e / e.sum(axis=-1, keepdims=True)
        probs[np.arange(n), safe_targets] -= 1.0
        probs *= (keep / count).reshape(-1, 1)
        return (probs * g,)

    return _result("cross_entropy", data, (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into `.grad` of every requires_grad leaf.

    The graph is the set of op records reachable from `loss`; it is walked
    in reverse topological order, each node exactly once. Leaves that do
    not lie on any path keep their (zero-initialized) gradient buffers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require gradients")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad += g.reshape(t.shape)
            continue
        for parent, pg in zip(t._node.inputs, t._node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                if pg.base is not None or not pg.flags.writeable:
                    pg = pg.copy()
                grads[id(parent)] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
