"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`ComputeGraph`.  Outside
of a graph nothing is recorded, which is how inference runs::

    with ComputeGraph() as g:
        loss = (x @ w).sum()
    g.backward(loss)          # w.grad now holds dloss/dw

Values are stored as float32; matmuls and reductions accumulate in float64
and round once on the way out.  :func:`float64_storage` switches storage to
float64 for numerical gradient checks.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64
_STORAGE = [F32]


@contextmanager
def float64_storage():
    """Store newly created tensors in float64 inside the block."""
    _STORAGE.append(F64)
    try:
        yield
    finally:
        _STORAGE.pop()


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_STORAGE[-1])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# the tape


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    output: Tensor
    backward: Callable | None = None


_ACTIVE: list["ComputeGraph"] = []


class ComputeGraph:
    """Append-only record of operations; node order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def node_of(self, t: Tensor) -> int | None:
        idx = self._index.get(id(t))
        if idx is not None and self.nodes[idx].output is t:
            return idx
        if t.requires_grad:
            return self._append(Node("leaf", (), t))
        return None

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        self._index[id(node.output)] = idx
        return idx

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable) -> None:
        ids = tuple(self.node_of(t) for t in inputs)
        if all(i is None for i in ids):
            return
        self._append(Node(op, ids, out, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        idx = self._index.get(id(loss))
        if idx is None or self.nodes[idx].output is not loss:
            raise ValueError("loss was not produced inside this graph")
        grads: dict[int, np.ndarray] = {idx: np.ones(loss.shape, dtype=F64)}
        for i in range(idx, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if node.op == "leaf":
                t = node.output
                g = g.astype(t.data.dtype)
                t.grad = g if t.grad is None else t.grad + g
                continue
            needs = tuple(j is not None for j in node.inputs)
            for j, gj in zip(node.inputs, node.backward(g, needs)):
                if j is None or gj is None:
                    continue
                grads[j] = gj if j not in grads else grads[j] + gj


def _record(op: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable) -> Tensor:
    if _ACTIVE:
        _ACTIVE[-1].record(op, inputs, out, backward)
    return out


def grad_enabled() -> bool:
    return bool(_ACTIVE)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _record("add", (a, b), out, back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _record("sub", (a, b), out, back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _record("mul", (a, b), out, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0))
    return _record("relu", (x,), out, lambda g, needs: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid64(x.data)
    out = Tensor(s)
    return _record("sigmoid", (x,), out, lambda g, needs: (g * s * (1.0 - s),))


def logit(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Inverse sigmoid, with the input clipped to [eps, 1 - eps]."""
    p = np.clip(x.data.astype(F64), eps, 1.0 - eps)
    out = Tensor(np.log(p) - np.log1p(-p))
    inside = (x.data >= eps) & (x.data <= 1.0 - eps)
    return _record("logit", (x,), out, lambda g, needs: (g * inside / (p * (1.0 - p)),))


def tabs(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data).astype(F64)
    return _record("abs", (x,), out, lambda g, needs: (g * sign,))


def sin(x: Tensor) -> Tensor:
    out = Tensor(np.sin(x.data.astype(F64)))
    return _record("sin", (x,), out, lambda g, needs: (g * np.cos(x.data.astype(F64)),))


def cos(x: Tensor) -> Tensor:
    out = Tensor(np.cos(x.data.astype(F64)))
    return _record("cos", (x,), out, lambda g, needs: (-g * np.sin(x.data.astype(F64)),))


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    x = x.astype(F64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    a64, b64 = a.data.astype(F64), b.data.astype(F64)
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into rows: one GEMM, and dW without a batch of partial products
        k = a.shape[-1]
        a2 = a64.reshape(-1, k)
        out = Tensor((a2 @ b64).reshape(*a.shape[:-1], b.shape[1]))

        def back(g, needs):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b64.T).reshape(a.shape) if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
            return ga, gb

        return _record("matmul", (a, b), out, back)

    out = Tensor(np.matmul(a64, b64))

    def back(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b64, -1, -2)), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a64, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, back)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis, dtype=F64))
    shape = x.shape

    def back(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (x,), out, back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data.astype(F64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def back(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of the last axis to zero mean, unit variance."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm needs at least two features per row")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},)")
    z = x.data.astype(F64)
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gm = gain.data.astype(F64)
    out = Tensor(xhat * gm + bias.data)

    def back(g, needs):
        gx = gg = gb = None
        if needs[0]:
            gh = g * gm
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _record("layer_norm", (x, gain, bias), out, back)


def sigmoid_focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss against 0/1 targets."""
    x = logits.data.astype(F64)
    y = np.asarray(targets, dtype=F64)
    if y.shape != x.shape:
        raise ShapeError(f"targets {y.shape} do not match logits {x.shape}")
    p = _sigmoid64(x)
    # log p and log(1-p) without cancellation
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)
    pos = alpha * (1.0 - p) ** gamma * -log_p
    neg = (1.0 - alpha) * p ** gamma * -log_q
    out = Tensor(y * pos + (1.0 - y) * neg)

    def back(g, needs):
        # d/dx of each branch, using dp/dx = p(1-p)
        d_pos = alpha * (gamma * (1.0 - p) ** gamma * p * log_p - (1.0 - p) ** (gamma + 1))
        d_neg = (1.0 - alpha) * (-gamma * p ** gamma * (1.0 - p) * log_q + p ** (gamma + 1))
        return (g * (y * d_pos + (1.0 - y) * d_neg),)

    return _record("focal", (logits,), out, back)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    src = x.shape
    return _record("reshape", (x,), out, lambda g, needs: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))
    return _record("permute", (x,), out, lambda g, needs: (np.transpose(g, inverse),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows of a 2-D tensor; gradients scatter-add back."""
    idx = np.asarray(index, dtype=np.int64)
    out = Tensor(x.data[idx])

    def back(g, needs):
        full = np.zeros(x.shape, dtype=F64)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", (x,), out, back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g, needs):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", parts, out, back)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
