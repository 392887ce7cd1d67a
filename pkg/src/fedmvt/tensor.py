"""Dense 2-D reverse-mode autodiff.

Operations record themselves on the *active* tape (see :class:`Tape`).
Outside a ``with tape:`` block nothing is recorded, which doubles as a
no-grad mode for evaluation.  Multiple tapes can be backpropagated
jointly through :class:`Bridge` links; that is how the two parties keep
separate graphs while still computing exact gradients.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

CE_EPS = 1e-12

_node_ids = itertools.count()
_seq = itertools.count()
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "fedmvt_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised on any shape mismatch.  There is no broadcasting."""


class NumericError(ValueError):
    pass


class Tensor:
    """2-D float64 matrix with an autodiff node identity."""

    __slots__ = ("values", "requires_grad", "node", "is_leaf", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got ndim={arr.ndim}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node = next(_node_ids)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP
    seq: int


@dataclass(frozen=True)
class Bridge:
    """Links ``src`` on one tape to the leaf ``dst`` standing in for it on another.

    During joint backward, once every consumer of ``dst`` has been processed,
    its gradient is passed through ``transmit`` and accumulated into ``src``.
    """

    src: Tensor
    dst: Tensor
    src_tape: "Tape"
    dst_tape: "Tape"
    seq: int
    transmit: Callable[[np.ndarray], np.ndarray] | None = None


class Tape:
    """Ordered op log.  Use as a context manager to make it the active tape."""

    def __init__(self, name: str = "tape"):
        self.name = name
        self.records: list[Record] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def active_tape() -> Tape | None:
    return _active_tape.get()


def next_seq() -> int:
    return next(_seq)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tape = _active_tape.get()
    result = Tensor(out)
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.is_leaf = False
        tape.records.append(Record(op, inputs, result, vjp, next(_seq)))
    return result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _mean_rows(op: str, a: Tensor, b: Tensor) -> int:
    """Row count for a row-mean reduction; an empty input has no mean."""
    _same_shape(op, a, b)
    if a.shape[0] == 0:
        raise ShapeError(f"{op}: mean over zero rows")
    return a.shape[0]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    av, bv = a.values, b.values
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _emit("subtract", a.values - b.values, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", c * a.values, (a,), lambda g: (c * g,))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a 1×n row to every row of ``a`` (the explicit form of a bias add)."""
    if row.shape[0] != 1 or row.shape[1] != a.shape[1]:
        raise ShapeError(f"add_row: row {row.shape} does not fit {a.shape}")
    return _emit(
        "add_row",
        a.values + row.values,
        (a, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _emit("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: m×n -> 1×n."""
    m = a.shape[0]
    return _emit(
        "mean_rows",
        a.values.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g / m, m, axis=0),),
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(
        "sum_all",
        np.array([[a.values.sum()]]),
        (a,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features: row counts {a.shape[0]} and {b.shape[0]} differ")
    if a.shape[1] == 0:
        return b
    if b.shape[1] == 0:
        return a
    p = a.shape[1]
    return _emit(
        "concat_features",
        np.concatenate([a.values, b.values], axis=1),
        (a, b),
        lambda g: (g[:, :p], g[:, p:]),
    )


def concat_samples(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_samples: empty list")
    n = parts[0].shape[1]
    for t in parts[1:]:
        if t.shape[1] != n:
            raise ShapeError(
                f"concat_samples: column counts {n} and {t.shape[1]} differ"
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [t.shape[0] for t in parts])

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(
        "concat_samples",
        np.concatenate([t.values for t in parts], axis=0),
        tuple(parts),
        vjp,
    )


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", a.values[idx], (a,), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) invalid for {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _emit("slice_cols", a.values[:, start:stop].copy(), (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    if np.isnan(a.values).any():
        raise NumericError("softmax_rows: NaN in input")
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", s, (a,), vjp)


def cross_entropy_mean(pred: Tensor, target: Tensor) -> Tensor:
    """-(1/m) Σ target·ln(pred + ε)."""
    m = _mean_rows("cross_entropy_mean", pred, target)
    p, y = pred.values, target.values
    logp = np.log(p + CE_EPS)
    value = -(y * logp).sum() / m
    return _emit(
        "cross_entropy_mean",
        np.array([[value]]),
        (pred, target),
        lambda g: (-g[0, 0] * y / (p + CE_EPS) / m, -g[0, 0] * logp / m),
    )


def mean_sq_row_distance(a: Tensor, b: Tensor) -> Tensor:
    """(1/m) Σ_i ‖a_i − b_i‖²."""
    m = _mean_rows("mean_sq_row_distance", a, b)
    diff = a.values - b.values
    value = (diff * diff).sum() / m

    def vjp(g):
        ga = 2.0 * g[0, 0] * diff / m
        return (ga, -ga)

    return _emit("mean_sq_row_distance", np.array([[value]]), (a, b), vjp)


def mean_sq_row_dot(a: Tensor, b: Tensor) -> Tensor:
    """(1/m) Σ_i (a_i · b_i)²."""
    m = _mean_rows("mean_sq_row_dot", a, b)
    av, bv = a.values, b.values
    dots = (av * bv).sum(axis=1, keepdims=True)
    value = (dots * dots).sum() / m

    def vjp(g):
        coef = 2.0 * g[0, 0] * dots / m
        return (coef * bv, coef * av)

    return _emit("mean_sq_row_dot", np.array([[value]]), (a, b), vjp)


def mean_sq_row_outer(a: Tensor, b: Tensor) -> Tensor:
    """(1/m) Σ_i ‖a_iᵀ b_i‖²_F = (1/m) Σ_i ‖a_i‖² ‖b_i‖²."""
    m = _mean_rows("mean_sq_row_outer", a, b)
    av, bv = a.values, b.values
    na = (av * av).sum(axis=1, keepdims=True)
    nb = (bv * bv).sum(axis=1, keepdims=True)
    value = (na * nb).sum() / m

    def vjp(g):
        c = 2.0 * g[0, 0] / m
        return (c * nb * av, c * na * bv)

    return _emit("mean_sq_row_outer", np.array([[value]]), (a, b), vjp)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.values.copy())


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

GradMap = dict[int, Tensor]


def _leaves(tape: Tape) -> dict[int, Tensor]:
    found: dict[int, Tensor] = {}
    for rec in tape.records:
        for t in rec.inputs:
            if t.is_leaf and t.requires_grad:
                found.setdefault(t.node, t)
    return found


def backward_joint(
    tapes: Sequence[Tape],
    seeds: Sequence[tuple[Tape, Tensor, np.ndarray]],
    bridges: Iterable[Bridge] = (),
    wrt: Sequence[Sequence[Tensor]] | None = None,
) -> list[GradMap]:
    """Reverse-mode sweep over several tapes at once.

    Each tape keeps its own accumulator; gradients only move between tapes
    through bridges.  Returns one leaf-gradient map per tape.  Every
    requires-grad leaf on a tape (and everything listed in ``wrt``) gets an
    entry, zero if unreachable.
    """
    tapes = list(tapes)
    index = {id(t): i for i, t in enumerate(tapes)}
    acc: list[dict[int, np.ndarray]] = [{} for _ in tapes]

    def accumulate(i: int, t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if g.shape != t.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor {t.shape}")
        cur = acc[i].get(t.node)
        acc[i][t.node] = g.copy() if cur is None else cur + g

    for tape, out, g in seeds:
        accumulate(index[id(tape)], out, np.asarray(g, dtype=np.float64))

    events: list[tuple[int, int, object]] = []
    for i, tape in enumerate(tapes):
        for rec in tape.records:
            events.append((rec.seq, i, rec))
    for br in bridges:
        events.append((br.seq, -1, br))
    events.sort(key=lambda e: e[0], reverse=True)

    for _, i, ev in events:
        if isinstance(ev, Bridge):
            dst_i, src_i = index[id(ev.dst_tape)], index[id(ev.src_tape)]
            g = acc[dst_i].get(ev.dst.node)
            if g is None:
                g = np.zeros(ev.dst.shape)
            if ev.transmit is not None:
                g = ev.transmit(g)
            accumulate(src_i, ev.src, g)
            continue
        rec: Record = ev  # type: ignore[assignment]
        g = acc[i].pop(rec.output.node, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is not None:
                accumulate(i, t, gi)

    results: list[GradMap] = []
    for i, tape in enumerate(tapes):
        leaves = _leaves(tape)
        if wrt is not None:
            for t in wrt[i]:
                leaves.setdefault(t.node, t)
        results.append(
            {
                node: Tensor(acc[i].get(node, np.zeros(t.shape)))
                for node, t in leaves.items()
                if t.requires_grad
            }
        )
    return results


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> GradMap:
    """Gradients of the scalar ``loss`` w.r.t. every requires-grad leaf on ``tape``."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    return backward_joint([tape], [(tape, loss, np.ones((1, 1)))], wrt=[list(wrt)])[0]
