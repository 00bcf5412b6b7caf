"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

A :class:`Tape` records every differentiable operation as an append-only
node list, so node ids are already in topological order and the backward
pass is a single reverse scan.  Tensors either live on a tape (``node_id``
set) or are detached constants; operations record a node only when at least
one operand is tape-attached.  A tape supports exactly one backward pass.

Everything is float64: gradient-check fidelity matters more than speed at
the scale this package targets.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError, TapeError
from .linalg import SvdResult, jacobi_svd

EPS_NORM = 1e-12  # row-normalization floor
EPS_RANK = 1e-10  # singular values <= this are excluded from the nuclear-norm
                  # backward (minimum-norm subgradient at degenerate values)

__all__ = [
    "EPS_NORM",
    "EPS_RANK",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat_cols",
    "concat_rows",
    "l2_normalize_rows",
    "logsumexp_rows",
    "matmul",
    "mean_all",
    "mul",
    "nuclear_norm",
    "relu",
    "rows",
    "sub",
    "sum_all",
    "svd",
    "take_rows",
    "transpose",
]


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only operation record for one forward graph."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _push(self, op: str, inputs: tuple[int, ...], backward) -> int:
        self._nodes.append(_Node(op, inputs, backward))
        return len(self._nodes) - 1

    def _register_leaf(self, tensor: "Tensor") -> int:
        nid = self._push("leaf", (), None)
        self._leaves.append(tensor)
        return nid

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar ``loss`` into every leaf.

        Returns a map from leaf node id to gradient and sets ``leaf.grad``.
        Consumes the tape: a second call raises :class:`TapeError`.
        """
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss tensor is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaf_ids = {t.node_id for t in self._leaves}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                continue
            for iid, ig in zip(node.inputs, node.backward(g)):
                if iid < 0 or ig is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + ig
                else:
                    grads[iid] = np.array(ig, dtype=np.float64, copy=True)
            if nid not in leaf_ids:
                del grads[nid]

        out: dict[int, np.ndarray] = {}
        for t in self._leaves:
            g = grads.get(t.node_id)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            out[t.node_id] = g
        return out


class Tensor:
    """Dense float64 array, optionally recorded on a gradient tape.

    Detached tensors (``tape is None``) are plain values; by convention they
    are not mutated after creation and are safe to share across threads.
    """

    __slots__ = ("data", "tape", "node_id", "requires_grad", "grad")

    def __init__(self, data, tape: Tape | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        if requires_grad:
            if tape is None:
                raise TapeError("a tensor that requires gradients needs a tape")
            self.tape = tape
            self.node_id = tape._register_leaf(self)
        elif tape is not None:
            raise TapeError("pass requires_grad=True to attach a leaf to a tape")

    @classmethod
    def param(cls, data, tape: Tape) -> "Tensor":
        """Leaf tensor that will receive a gradient from ``tape.backward``."""
        return cls(data, tape=tape, requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return _div_scalar(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operands live on different tapes")
    return tape


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable | None) -> Tensor:
    out = Tensor(out_data)
    tape = _result_tape(inputs)
    if tape is not None:
        ids = tuple(t.node_id if t.tape is not None else -1 for t in inputs)
        out.tape = tape
        out.node_id = tape._push(op, ids, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after a broadcasting forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    na, nb = a.tape is not None, b.tape is not None

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e
    na, nb = a.tape is not None, b.tape is not None

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(-g, b.data.shape) if nb else None,
        )

    return _record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    na, nb = a.tape is not None, b.tape is not None
    da, db = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g * db, da.shape) if na else None,
            _unbroadcast(g * da, db.shape) if nb else None,
        )

    return _record("mul", (a, b), out, bwd)


def _div_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data / s
    na = a.tape is not None

    def bwd(g):
        return (g / s if na else None,)

    return _record("div", (a,), out, bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    na, nb = a.tape is not None, b.tape is not None
    da, db = a.data, b.data

    def bwd(g):
        return (
            g @ db.T if na else None,
            da.T @ g if nb else None,
        )

    return _record("matmul", (a, b), out, bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")

    def bwd(g):
        return (g.T,)

    return _record("transpose", (a,), a.data.T, bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (a,), np.where(mask, a.data, 0.0), bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        return (np.broadcast_to(g, shape),)

    return _record("sum", (a,), np.asarray(a.data.sum()), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    n = a.data.size

    def bwd(g):
        return (np.broadcast_to(g / n, shape),)

    return _record("mean", (a,), np.asarray(a.data.mean()), bwd)


def rows(a, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``a[start:stop]`` of a matrix."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"rows expects a matrix, got {a.shape}")
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeError(f"rows: slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("rows", (a,), a.data[start:stop].copy(), bwd)


def take_rows(a, indices) -> Tensor:
    """Row gather ``a[indices]``; duplicate indices accumulate in backward."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape}")
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", (a,), a.data[idx].copy(), bwd)


def _check_concat(tensors: Sequence[Tensor], axis: int) -> None:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    other = 1 - axis
    first = tensors[0].data
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"concat expects matrices, got {t.shape}")
        if t.data.shape[other] != first.shape[other]:
            raise ShapeError(f"concat: mismatched shapes {first.shape} vs {t.shape}")


def concat_rows(tensors: Sequence) -> Tensor:
    """Stack matrices along axis 0."""
    ts = [_as_tensor(t) for t in tensors]
    _check_concat(ts, axis=0)
    sizes = [t.data.shape[0] for t in ts]
    offsets = np.cumsum([0] + sizes)
    needed = [t.tape is not None for t in ts]

    def bwd(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]] if needed[i] else None
            for i in range(len(ts))
        )

    return _record("concat_rows", ts, np.concatenate([t.data for t in ts], axis=0), bwd)


def concat_cols(tensors: Sequence) -> Tensor:
    """Stack matrices along axis 1."""
    ts = [_as_tensor(t) for t in tensors]
    _check_concat(ts, axis=1)
    sizes = [t.data.shape[1] for t in ts]
    offsets = np.cumsum([0] + sizes)
    needed = [t.tape is not None for t in ts]

    def bwd(g):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if needed[i] else None
            for i in range(len(ts))
        )

    return _record("concat_cols", ts, np.concatenate([t.data for t in ts], axis=1), bwd)


def logsumexp_rows(a) -> Tensor:
    """Row-wise log(sum(exp(.))) of a matrix, shape (m, 1); overflow-safe."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a matrix, got {a.shape}")
    mx = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - mx)
    se = e.sum(axis=1, keepdims=True)
    out = np.log(se) + mx
    softmax = e / se

    def bwd(g):
        return (g * softmax,)

    return _record("logsumexp", (a,), out, bwd)


def l2_normalize_rows(a) -> Tensor:
    """Scale every row of a matrix to unit Euclidean norm."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if (norms <= EPS_NORM).any():
        raise DegenerateInputError(
            f"row norm at or below {EPS_NORM:g}; cannot normalize"
        )
    y = a.data / norms

    def bwd(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * inner) / norms,)

    return _record("l2norm_rows", (a,), y, bwd)


def nuclear_norm(a) -> Tensor:
    """Sum of singular values; backward is U_r @ V_r.T over the singular
    directions with value > EPS_RANK (the minimum-norm subgradient)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"nuclear_norm expects a matrix, got {a.shape}")
    res = jacobi_svd(a.data)
    keep = res.S > EPS_RANK
    subgrad = res.U[:, keep] @ res.V[:, keep].T

    def bwd(g):
        return (float(g) * subgrad,)

    return _record("nuclear_norm", (a,), np.asarray(res.S.sum()), bwd)


def svd(a) -> SvdResult:
    """Plain (non-differentiable) SVD of a tensor or array."""
    return jacobi_svd(a.data if isinstance(a, Tensor) else a)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss.tape is None:
        raise TapeError("loss tensor is not attached to a tape")
    return loss.tape.backward(loss)
