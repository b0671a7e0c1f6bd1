"""
Dense-matrix engine with reverse-mode gradient propagation.

Every value is a 2-D numpy array wrapped in a Tensor. Ops that touch at least one
tensor with requires_grad attach a ComputationRecord to their output; backward()
walks those records from a scalar loss in reverse topological order.

There is no global tape: each graph lives only through the records hanging off its
tensors, so independent graphs can be built on different threads.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .exceptions import ContractViolation, DegenerateRowError

logger = structlog.get_logger()

# Normalization guard for l2_normalize_rows
EPS_NORM = 1e-12

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class ComputationRecord:
    """How an op output was produced: op id, its inputs and the closure computing input grads."""
    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn


class Tensor:
    """Row-major real matrix with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "_record")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.array(values, dtype=dtype, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ContractViolation(f"Tensor is 2-D only, got {arr.ndim} dimensions")
        self.values: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._record: Optional[ComputationRecord] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an array without copying it."""
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.requires_grad = requires_grad
        out._record = None
        return out

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def record(self) -> Optional[ComputationRecord]:
        return self._record

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ContractViolation(f"item() needs a 1x1 tensor, got shape {self.values.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all of it routes through the module-level ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Gradient-free tensor, matching `like`'s dtype when given."""
    dtype = like.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def zeros_scalar(like: Optional[Tensor] = None) -> Tensor:
    return constant(0.0, like=like)


def _make(values: np.ndarray, op: str, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires_grad=requires_grad)
    if requires_grad:
        out._record = ComputationRecord(op=op, inputs=inputs, backward_fn=backward_fn)
    return out


# ─────────────────────────────────────────────────────────────────────────────
# Forward ops
# ─────────────────────────────────────────────────────────────────────────────

def detach(x: Tensor) -> Tensor:
    """Forward identity that severs gradient flow. Shares the value buffer."""
    return Tensor._wrap(x.values, requires_grad=False)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """a @ b, or a @ b.T when transpose_b is set."""
    inner_b = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner_b:
        raise ContractViolation(
            f"matmul shape mismatch: {a.shape} @ {b.shape}{'^T' if transpose_b else ''}"
        )
    bv = b.values.T if transpose_b else b.values
    out = a.values @ bv

    def backward_fn(g):
        ga = g @ bv.T if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif transpose_b:
            gb = g.T @ a.values
        else:
            gb = a.values.T @ g
        return ga, gb

    return _make(out, "matmul", (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x cols row to every row of x (the only broadcast supported)."""
    if bias.shape != (1, x.shape[1]):
        raise ContractViolation(f"bias row must be (1, {x.shape[1]}), got {bias.shape}")

    def backward_fn(g):
        return g, g.sum(axis=0, keepdims=True)

    return _make(x.values + bias.values, "add_row", (x, bias), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.values * c, "scale", (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.values + c, "add_scalar", (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = x.values > 0
    out = np.where(mask, x.values, 0.0).astype(x.dtype, copy=False)
    return _make(out, "relu", (x,), lambda g: (g * mask,))


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractViolation(f"row index out of range for {x.shape[0]} rows")

    def backward_fn(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.values[idx], "gather_rows", (x,), backward_fn)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractViolation("concat_rows needs at least one tensor")
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ContractViolation(f"concat_rows needs equal column counts, got {sorted(cols)}")
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _make(np.vstack([t.values for t in tensors]), "concat_rows", tuple(tensors), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = np.array([[x.values.sum()]], dtype=x.dtype)
    return _make(out, "sum", (x,), lambda g: (np.full_like(x.values, g[0, 0]),))


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    out = np.array([[x.values.mean()]], dtype=x.dtype)
    return _make(out, "mean", (x,), lambda g: (np.full_like(x.values, g[0, 0] / n),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(weights * x) with constant weights of x's shape."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ContractViolation(f"weights shape {w.shape} != tensor shape {x.shape}")
    out = np.array([[np.sum(w * x.values)]], dtype=x.dtype)
    return _make(out, "weighted_sum", (x,), lambda g: (g[0, 0] * w,))


def l2_normalize_rows(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    norms = np.sqrt(np.sum(x.values * x.values, axis=1, keepdims=True))
    small = np.flatnonzero(norms[:, 0] < eps)
    if small.size:
        row = int(small[0])
        raise DegenerateRowError(row=row, norm=float(norms[row, 0]), eps=eps)
    y = x.values / norms

    def backward_fn(g):
        # Jacobian of x/|x|: (I - y y^T) / |x|, applied per row
        radial = np.sum(g * y, axis=1, keepdims=True)
        return ((g - y * radial) / norms,)

    return _make(y, "l2_normalize_rows", (x,), backward_fn)


def masked_log_sum_exp_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """
    Per-row log-sum-exp over the entries selected by a boolean mask.

    Rows with an empty mask produce 0 and pass no gradient.

    Returns:
        Tensor of shape (rows, 1)
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ContractViolation(f"mask shape {mask.shape} != tensor shape {x.shape}")
    has_any = mask.any(axis=1, keepdims=True)
    masked = np.where(mask, x.values, -np.inf)
    row_max = np.where(has_any, masked.max(axis=1, keepdims=True, initial=-np.inf), 0.0)
    shifted = np.where(mask, np.exp(np.where(mask, x.values - row_max, 0.0)), 0.0)
    totals = shifted.sum(axis=1, keepdims=True)
    out = np.where(has_any, row_max + np.log(np.where(has_any, totals, 1.0)), 0.0).astype(x.dtype)

    def backward_fn(g):
        weights = np.where(has_any, shifted / np.where(has_any, totals, 1.0), 0.0)
        return (g * weights,)

    return _make(out, "masked_log_sum_exp_rows", (x,), backward_fn)


def log_sum_exp(v: ArrayLike) -> float:
    """Stable ln(sum(exp(v))) of a plain vector: max(v) + ln sum exp(v - max(v))."""
    arr = np.asarray(v, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ContractViolation("log_sum_exp of an empty vector")
    m = arr.max()
    return float(m + np.log(np.sum(np.exp(arr - m))))


# ─────────────────────────────────────────────────────────────────────────────
# Backward
# ─────────────────────────────────────────────────────────────────────────────

def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over requires_grad ancestors: every input precedes its consumers."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for inp in node._record.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor reachable from loss.

    Args:
        loss: 1x1 tensor produced by recorded ops

    Raises:
        ContractViolation: loss is not scalar
    """
    if loss.shape != (1, 1):
        raise ContractViolation(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}

    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        record = node._record
        if record is None:
            continue
        for inp, input_grad in zip(record.inputs, record.backward_fn(g)):
            if input_grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            pending[key] = input_grad if key not in pending else pending[key] + input_grad
