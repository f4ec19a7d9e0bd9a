"""Dense float64 tensors with a reverse-mode differentiation tape.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients.  ``backward`` walks the
graph once in reverse topological order.  Broadcasting is deliberately narrow:
scalar-with-tensor and same-shape only.  Row/column scaling has dedicated ops.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


@dataclass
class NumericHealth:
    """Counts non-finite values produced by forward ops.

    Training does not abort on these; ``exp`` may underflow or overflow
    legitimately and the caller decides what to do with the log.
    """

    nan_count: int = 0
    inf_count: int = 0
    events: list[str] = field(default_factory=list)
    max_events: int = 200

    def record(self, op: str, arr: np.ndarray) -> None:
        if np.isfinite(arr).all():
            return
        nans = int(np.isnan(arr).sum())
        infs = int(np.isinf(arr).sum())
        self.nan_count += nans
        self.inf_count += infs
        if len(self.events) < self.max_events:
            self.events.append(f"{op}: {nans} nan, {infs} inf")
        logger.debug("numeric health: %s produced %d nan / %d inf", op, nans, infs)

    def reset(self) -> None:
        self.nan_count = 0
        self.inf_count = 0
        self.events.clear()

    def as_dict(self) -> dict:
        return {"nan_count": self.nan_count, "inf_count": self.inf_count, "events": list(self.events)}


HEALTH = NumericHealth()

# Names of ops whose backward is deliberately corrupted; used only by the
# gradient-check negative control.
_FAULTS: set[str] = set()


def inject_fault(op: str | None) -> None:
    """Corrupt the backward rule of ``op`` (``None`` clears all faults)."""
    if op is None:
        _FAULTS.clear()
    else:
        _FAULTS.add(op)


def _maybe_fault(op: str, grads: tuple) -> tuple:
    if op in _FAULTS:
        return tuple(None if g is None else 1.1 * g for g in grads)
    return grads


BackwardFn = Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        HEALTH.record(op, data)
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
        return self._backward is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    # Undo scalar broadcasting.
    if _is_scalar(t) and grad.ndim > 0:
        return np.asarray(grad.sum())
    return grad


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _maybe_fault("add", (_reduce_to(g, a), _reduce_to(g, b)))

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _maybe_fault("sub", (_reduce_to(g, a), _reduce_to(-g, b)))

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _maybe_fault("mul", (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)))

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return _maybe_fault("div", (_reduce_to(ga, a), _reduce_to(gb, b)))

    return Tensor._result(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return _maybe_fault("scale", (c * g,))

    return Tensor._result(c * a.data, (a,), bw, "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore", under="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return _maybe_fault("exp", (g * out,))

    return Tensor._result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return _maybe_fault("log", (g / a.data,))

    return Tensor._result(out, (a,), bw, "log")


def square(a: Tensor) -> Tensor:
    def bw(g):
        return _maybe_fault("square", (2.0 * a.data * g,))

    return Tensor._result(a.data * a.data, (a,), bw, "square")


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, p)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return _maybe_fault("power", (g * p * np.power(a.data, p - 1.0),))

    return Tensor._result(out, (a,), bw, "power")


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bw(g):
        # subgradient 0 at 0
        return _maybe_fault("relu", (g * mask,))

    # np.maximum propagates NaN so divergence is not masked
    return Tensor._result(np.maximum(a.data, 0.0), (a,), bw, "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor

    def bw(g):
        return _maybe_fault("clamp_min", (g * keep,))

    return Tensor._result(np.where(keep, a.data, floor), (a,), bw, "clamp_min")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, div, exp, square, relu, scale, ..."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


_ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "square": square,
    "power": power,
    "relu": relu,
    "scale": scale,
    "clamp_min": clamp_min,
}


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return _maybe_fault("matmul", (ga, gb))

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def bw(g):
        return (g.T,)

    return Tensor._result(a.data.T, (a,), bw, "transpose")


def _check_scaling(a: Tensor, v: Tensor, axis: int, op: str) -> None:
    if a.ndim != 2 or v.size != a.shape[axis] or (v.ndim == 2 and 1 not in v.shape) or v.ndim > 2:
        raise ShapeError(f"{op}: cannot scale {a.shape} by vector of shape {v.shape}")


def scale_rows(a: Tensor, v) -> Tensor:
    """Multiply row ``i`` of ``a`` by ``v[i]`` (``diag(v) @ a``)."""
    a, v = as_tensor(a), as_tensor(v)
    _check_scaling(a, v, 0, "scale_rows")
    col = v.data.reshape(-1, 1)

    def bw(g):
        gv = (g * a.data).sum(axis=1).reshape(v.shape) if v.requires_grad else None
        return _maybe_fault("scale_rows", (g * col, gv))

    return Tensor._result(a.data * col, (a, v), bw, "scale_rows")


def scale_cols(a: Tensor, v) -> Tensor:
    """Multiply column ``j`` of ``a`` by ``v[j]`` (``a @ diag(v)``)."""
    a, v = as_tensor(a), as_tensor(v)
    _check_scaling(a, v, 1, "scale_cols")
    row = v.data.reshape(1, -1)

    def bw(g):
        gv = (g * a.data).sum(axis=0).reshape(v.shape) if v.requires_grad else None
        return _maybe_fault("scale_cols", (g * row, gv))

    return Tensor._result(a.data * row, (a, v), bw, "scale_cols")


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return _maybe_fault("softmax_rows", (out * (g - inner),))

    return Tensor._result(out, (a,), bw, "softmax_rows")


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"log_softmax_rows: expected a matrix, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("log_softmax_rows: NaN in input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def bw(g):
        probs = np.exp(out)
        return _maybe_fault("log_softmax_rows", (g - probs * g.sum(axis=1, keepdims=True),))

    return Tensor._result(out, (a,), bw, "log_softmax_rows")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum()), (a,), bw, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean of all entries, or along ``axis`` (axis removed)."""
    if axis is None:
        n = a.size
        return scale(sum(a), 1.0 / n)
    n = a.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return Tensor._result(a.data.mean(axis=axis), (a,), bw, "mean")


def row_sum(a: Tensor) -> Tensor:
    """Sum across columns; returns an ``n x 1`` column."""
    if a.ndim != 2:
        raise ShapeError(f"row_sum: expected a matrix, got shape {a.shape}")

    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(a.data.sum(axis=1, keepdims=True), (a,), bw, "row_sum")


def col_sum(a: Tensor) -> Tensor:
    """Sum across rows; returns a ``1 x m`` row."""
    if a.ndim != 2:
        raise ShapeError(f"col_sum: expected a matrix, got shape {a.shape}")

    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(a.data.sum(axis=0, keepdims=True), (a,), bw, "col_sum")


def frobenius_norm(a: Tensor) -> Tensor:
    norm = float(np.sqrt((a.data * a.data).sum()))

    def bw(g):
        # subgradient 0 at the origin
        if norm == 0.0:
            return (np.zeros_like(a.data),)
        return _maybe_fault("frobenius_norm", (g * a.data / norm,))

    return Tensor._result(np.asarray(norm), (a,), bw, "frobenius_norm")


def reduce(op: str, a: Tensor) -> Tensor:
    """Dispatch by name: sum, mean, row_sum, col_sum, frobenius_norm."""
    fns = {"sum": sum, "mean": mean, "row_sum": row_sum, "col_sum": col_sum, "frobenius_norm": frobenius_norm}
    try:
        return fns[op](a)
    except KeyError:
        raise ContractError(f"unknown reduction {op!r}") from None


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape))


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded once propagated.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


@dataclass
class AdamState:
    """Moment accumulators for a fixed, ordered list of parameters."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> "AdamState":
        params = list(params)
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, then zero the gradients."""
    if len(params) != len(state.m):
        raise ContractError(f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1**t)
        v_hat = state.v[i] / (1.0 - b2**t)
        if state.lr != 0.0:
            p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = np.zeros_like(p.data)
