"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions.  When a :class:`Tape` is active (``with
Tape() as tape:``) and at least one input requires a gradient, the op is
recorded together with its backward rule.  Outside a tape every op is a pure
value computation, which is what inference uses.

Example::

    w = GradTensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(relu(matmul(x, w)))
    backward(tape, loss)
    w.grad  # dLoss/dw
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteError, ShapeError, TapeStateError

__all__ = [
    "GradTensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "leaky_relu",
    "elu",
    "exp",
    "log",
    "power",
    "clip_min",
    "concat_cols",
    "gather_rows",
    "segment_sum",
    "segment_mean",
    "segment_softmax",
    "softmax_rows",
    "log_softmax_rows",
    "sum_all",
    "mean_all",
    "sum_rows",
    "dropout",
    "detach",
]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "consistgnn_active_tape", default=None
)


class GradTensor:
    """A 2-D float64 array that can take part in differentiation.

    1-D inputs become a single row and scalars become ``1x1``.  ``grad`` is
    filled by :func:`backward` for leaves created with ``requires_grad=True``
    and accumulates across backward passes until reset to ``None``.
    """

    __slots__ = ("values", "grad", "requires_grad", "tape_id", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, *, _copy: bool = True):
        arr = np.array(values, dtype=np.float64) if _copy else np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"GradTensor must be at most 2-D, got shape {arr.shape}")
        _check_finite(arr, "GradTensor")
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        # id of the tape that produced this tensor; None for leaves/constants
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.values.shape}")
        return float(self.values[0, 0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"GradTensor(shape={self.shape}{flag})"


@dataclass
class _Record:
    inputs: tuple[GradTensor, ...]
    output: GradTensor
    rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable ops, consumed by one backward pass."""

    _next_id = 0

    def __init__(self):
        Tape._next_id += 1
        self.id = Tape._next_id
        self.records: list[_Record] = []
        self.cleared = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.cleared:
            raise TapeStateError("tape already consumed by a backward pass")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


def backward(tape: Tape, loss: GradTensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``, then clear the tape."""
    if tape.cleared:
        raise TapeStateError("backward called on a cleared tape")
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.shape}")
    if loss.tape_id != tape.id:
        raise TapeStateError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[int, GradTensor] = {}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        for inp, g_in in zip(rec.inputs, rec.rule(g_out)):
            if g_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
            if inp.tape_id is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.records.clear()
    tape.cleared = True


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _as_tensor(x) -> GradTensor:
    return x if isinstance(x, GradTensor) else GradTensor(x)


def _make(values: np.ndarray, op: str, inputs: tuple[GradTensor, ...], rule) -> GradTensor:
    _check_finite(values, op)
    out = GradTensor(values, _copy=False)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = tape.id
        tape.records.append(_Record(inputs, out, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: GradTensor, b: GradTensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def matmul(a: GradTensor, b: GradTensor) -> GradTensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), rule)


def add(a, b) -> GradTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> GradTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> GradTensor:
    """Elementwise product with row/column broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> GradTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def rule(g):
        return (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))

    return _make(out, "div", (a, b), rule)


def scale(a: GradTensor, c: float) -> GradTensor:
    c = float(c)
    return _make(a.values * c, "scale", (a,), lambda g: (g * c,))


def relu(a: GradTensor) -> GradTensor:
    pos = a.values > 0
    return _make(np.where(pos, a.values, 0.0), "relu", (a,), lambda g: (g * pos,))


def leaky_relu(a: GradTensor, slope: float = 0.2) -> GradTensor:
    pos = a.values > 0
    factor = np.where(pos, 1.0, slope)
    return _make(a.values * factor, "leaky_relu", (a,), lambda g: (g * factor,))


def elu(a: GradTensor) -> GradTensor:
    pos = a.values > 0
    neg_part = np.expm1(np.minimum(a.values, 0.0))
    out = np.where(pos, a.values, neg_part)
    deriv = np.where(pos, 1.0, neg_part + 1.0)
    return _make(out, "elu", (a,), lambda g: (g * deriv,))


def exp(a: GradTensor) -> GradTensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: GradTensor) -> GradTensor:
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, "log", (a,), lambda g: (g / av,))


def power(a: GradTensor, p: float) -> GradTensor:
    """Elementwise ``a**p`` for a scalar exponent."""
    av = a.values
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.power(av, p)

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * np.power(av, p - 1.0),)

    return _make(out, "power", (a,), rule)


def clip_min(a: GradTensor, lo: float) -> GradTensor:
    """``max(a, lo)``; gradient passes only where ``a >= lo``."""
    keep = a.values >= lo
    return _make(np.where(keep, a.values, lo), "clip_min", (a,), lambda g: (g * keep,))


def dropout(a: GradTensor, mask: np.ndarray) -> GradTensor:
    """Multiply by a caller-drawn mask of 0 and 1/keep entries."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout mask {mask.shape} does not match {a.shape}")
    return _make(a.values * mask, "dropout", (a,), lambda g: (g * mask,))


def detach(a: GradTensor) -> GradTensor:
    """Same values, cut off from the tape."""
    return GradTensor(a.values)


# ---------------------------------------------------------------------------
# structural


def concat_cols(parts: Sequence[GradTensor]) -> GradTensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.values for p in parts], axis=1), "concat_cols",
                 tuple(parts), rule)


def gather_rows(a: GradTensor, index) -> GradTensor:
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def rule(g):
        return (_segment_sum_values(g, idx, n),)

    return _make(a.values[idx], "gather_rows", (a,), rule)


def _segment_matrix(ids: np.ndarray, num_segments: int) -> sp.csr_matrix:
    e = ids.shape[0]
    return sp.csr_matrix((np.ones(e), (ids, np.arange(e))), shape=(num_segments, e))


def _segment_sum_values(values: np.ndarray, ids: np.ndarray, num_segments: int) -> np.ndarray:
    if values.shape[0] == 0:
        return np.zeros((num_segments, values.shape[1]))
    return np.asarray(_segment_matrix(ids, num_segments) @ values)


def _check_segments(values: GradTensor, segment_ids, num_segments: int) -> np.ndarray:
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != values.shape[0]:
        raise ShapeError(f"segment ids length {ids.shape} does not match {values.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range for {num_segments} segments")
    return ids


def segment_sum(values: GradTensor, segment_ids, num_segments: int) -> GradTensor:
    ids = _check_segments(values, segment_ids, num_segments)
    out = _segment_sum_values(values.values, ids, num_segments)
    return _make(out, "segment_sum", (values,), lambda g: (g[ids],))


def segment_mean(values: GradTensor, segment_ids, num_segments: int) -> GradTensor:
    """Per-segment row means; empty segments give zero rows."""
    ids = _check_segments(values, segment_ids, num_segments)
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None]
    out = _segment_sum_values(values.values, ids, num_segments) * inv
    return _make(out, "segment_mean", (values,), lambda g: ((g * inv)[ids],))


def segment_softmax(scores: GradTensor, segment_ids, num_segments: int) -> GradTensor:
    """Softmax of each column over the rows sharing a segment id."""
    ids = _check_segments(scores, segment_ids, num_segments)
    sv = scores.values
    seg_max = np.full((num_segments, sv.shape[1]), -np.inf)
    np.maximum.at(seg_max, ids, sv)
    ex = np.exp(sv - seg_max[ids])
    denom = _segment_sum_values(ex, ids, num_segments)
    out = ex / denom[ids]

    def rule(g):
        dot = _segment_sum_values(g * out, ids, num_segments)
        return (out * (g - dot[ids]),)

    return _make(out, "segment_softmax", (scores,), rule)


def softmax_rows(a: GradTensor) -> GradTensor:
    if a.values.size == 0:
        raise ShapeError("softmax_rows of an empty tensor")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, "softmax_rows", (a,), rule)


def log_softmax_rows(a: GradTensor) -> GradTensor:
    if a.values.size == 0:
        raise ShapeError("log_softmax_rows of an empty tensor")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, "log_softmax_rows", (a,), rule)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: GradTensor) -> GradTensor:
    shape = a.shape
    return _make(np.array([[a.values.sum()]]), "sum_all", (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: GradTensor) -> GradTensor:
    shape = a.shape
    n = a.values.size
    if n == 0:
        raise ShapeError("mean_all of an empty tensor")
    return _make(np.array([[a.values.sum() / n]]), "mean_all", (a,),
                 lambda g: (np.full(shape, g[0, 0] / n),))


def sum_rows(a: GradTensor) -> GradTensor:
    """Sum across columns: ``m x n -> m x 1``."""
    cols = a.shape[1]
    return _make(a.values.sum(axis=1, keepdims=True), "sum_rows", (a,),
                 lambda g: (np.repeat(g, cols, axis=1),))
