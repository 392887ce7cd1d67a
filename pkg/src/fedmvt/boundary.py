"""The A↔B boundary: typed messages, an append-only ledger, and its audit.

Everything that crosses between the parties goes through
:class:`BoundaryChannel`.  In split mode the payload is round-tripped
through the wire encoding and the receiver gets a fresh leaf tensor; the
gradient for that leaf travels back as a ``GradBackward`` message during
the joint backward pass.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from fedmvt import tensor as T
from fedmvt.tensor import Bridge, Tape, Tensor


class MessageKind(str, Enum):
    REPR_FORWARD = "ReprForward"
    GRAD_BACKWARD = "GradBackward"
    LOSS_SCALAR_REPORT = "LossScalarReport"


class Direction(str, Enum):
    A_TO_B = "AtoB"
    B_TO_A = "BtoA"

    def reverse(self) -> "Direction":
        return Direction.B_TO_A if self is Direction.A_TO_B else Direction.A_TO_B


ALLOWED_KINDS = frozenset(k.value for k in MessageKind)
_KIND_CODES = {k: i for i, k in enumerate(MessageKind)}
_DIR_CODES = {d: i for i, d in enumerate(Direction)}
_HEADER = struct.Struct("<4sBBBxQII")
_MAGIC = b"FMVT"
_VERSION = 1


def fingerprint(values: np.ndarray) -> str:
    """SHA-256 of the little-endian float64 bytes (C order)."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


@dataclass(frozen=True)
class BoundaryMessage:
    kind: MessageKind
    payload: Tensor
    step: int
    direction: Direction

    @property
    def shape(self) -> tuple[int, int]:
        return self.payload.shape


def encode_message(msg: BoundaryMessage) -> bytes:
    rows, cols = msg.shape
    header = _HEADER.pack(
        _MAGIC, _VERSION, _KIND_CODES[msg.kind], _DIR_CODES[msg.direction], msg.step, rows, cols
    )
    return header + np.ascontiguousarray(msg.payload.values, dtype="<f8").tobytes()


def decode_message(buf: bytes) -> BoundaryMessage:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated message header")
    magic, version, kind, direction, step, rows, cols = _HEADER.unpack_from(buf)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not a boundary message")
    body = buf[_HEADER.size :]
    if len(body) != rows * cols * 8:
        raise ValueError(f"payload length {len(body)} does not match {rows}x{cols}")
    values = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return BoundaryMessage(
        list(MessageKind)[kind], Tensor(values), step, list(Direction)[direction]
    )


@dataclass(frozen=True)
class LedgerEntry:
    step: int
    direction: str
    kind: str
    shape: tuple[int, int]
    fingerprint: str
    row_fingerprints: tuple[str, ...] = ()
    zero_rows: tuple[int, ...] = ()


def _entry_for(step, direction, kind, values: np.ndarray) -> LedgerEntry:
    zero = tuple(int(i) for i in np.flatnonzero(~values.any(axis=1))) if values.size else ()
    return LedgerEntry(
        step,
        str(getattr(direction, "value", direction)),
        str(getattr(kind, "value", kind)),
        tuple(values.shape),
        fingerprint(values),
        tuple(fingerprint(r) for r in values),
        zero,
    )


class BoundaryLedger:
    """Append-only log of every message, plus the fingerprints nothing may match."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self.forbidden_rows: dict[str, str] = {}
        self.forbidden_matrices: dict[str, str] = {}

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, msg: BoundaryMessage) -> LedgerEntry:
        entry = _entry_for(msg.step, msg.direction, msg.kind, msg.payload.values)
        self._entries.append(entry)
        return entry

    def record_raw(self, step: int, direction: str, kind: str, values: np.ndarray) -> LedgerEntry:
        """Append an entry without kind validation (fault-injection hook)."""
        entry = _entry_for(step, direction, kind, np.atleast_2d(np.asarray(values, dtype=np.float64)))
        self._entries.append(entry)
        return entry

    def forbid_rows(self, values: np.ndarray, label: str) -> None:
        for i, row in enumerate(np.atleast_2d(values)):
            if row.any():
                self.forbidden_rows.setdefault(fingerprint(row), f"{label}[{i}]")

    def forbid_matrix(self, values: np.ndarray, label: str) -> None:
        if np.asarray(values).any():
            self.forbidden_matrices.setdefault(fingerprint(values), label)


@dataclass
class Violation:
    step: int
    kind: str
    direction: str
    reason: str


@dataclass
class AuditReport:
    passed: bool
    n_messages: int
    counts: dict[str, int] = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)

    def summary(self) -> str:
        if self.passed:
            return f"PASS ({self.n_messages} messages)"
        first = self.violations[0]
        return (
            f"FAIL ({len(self.violations)} violations; first at step {first.step}: "
            f"{first.reason})"
        )


def audit_ledger(ledger: BoundaryLedger) -> AuditReport:
    """Structural privacy check of a finished run.

    Fails on any unknown message kind, on any payload whose fingerprint equals
    a registered parameter matrix, and on any payload row equal to a
    registered raw-feature or label row.  All-zero rows carry no information
    and are ignored.
    """
    counts: dict[str, int] = {}
    violations: list[Violation] = []
    for e in ledger.entries:
        counts[e.kind] = counts.get(e.kind, 0) + 1
        if e.kind not in ALLOWED_KINDS:
            violations.append(Violation(e.step, e.kind, e.direction, f"message kind {e.kind!r} not allowed"))
            continue
        if e.fingerprint in ledger.forbidden_matrices and len(e.zero_rows) < e.shape[0]:
            what = ledger.forbidden_matrices[e.fingerprint]
            violations.append(Violation(e.step, e.kind, e.direction, f"payload equals {what}"))
            continue
        zero = set(e.zero_rows)
        for i, fp in enumerate(e.row_fingerprints):
            if i in zero:
                continue
            hit = ledger.forbidden_rows.get(fp)
            if hit:
                violations.append(
                    Violation(e.step, e.kind, e.direction, f"payload row {i} equals {hit}")
                )
                break
    return AuditReport(not violations, len(ledger), counts, violations)


class BoundaryChannel:
    """In-process transport between the parties.

    With ``split=False`` the channel is a pass-through (one shared graph, no
    messages); this exists to check the split backward against a monolithic one.
    """

    def __init__(self, ledger: BoundaryLedger | None = None, split: bool = True):
        self.ledger = ledger if ledger is not None else BoundaryLedger()
        self.split = split
        self.step = 0
        self._bridges: list[Bridge] = []

    def _deliver(self, kind: MessageKind, values: np.ndarray, direction: Direction) -> np.ndarray:
        msg = BoundaryMessage(kind, Tensor(values), self.step, direction)
        self.ledger.record(msg)
        return decode_message(encode_message(msg)).payload.values

    def send(
        self,
        t: Tensor,
        kind: MessageKind,
        direction: Direction,
        src_tape: Tape,
        dst_tape: Tape,
        differentiable: bool = True,
    ) -> Tensor:
        if kind is MessageKind.GRAD_BACKWARD:
            raise ValueError("gradients are sent by the backward pass, not directly")
        if not self.split:
            return t if differentiable else T.detach(t)
        received = Tensor(self._deliver(kind, t.values, direction))
        if differentiable and t.requires_grad:
            received.requires_grad = True
            step = self.step

            def transmit(g: np.ndarray, _dir=direction.reverse(), _step=step) -> np.ndarray:
                msg = BoundaryMessage(MessageKind.GRAD_BACKWARD, Tensor(g), _step, _dir)
                self.ledger.record(msg)
                return decode_message(encode_message(msg)).payload.values

            self._bridges.append(Bridge(t, received, src_tape, dst_tape, T.next_seq(), transmit))
        return received

    def take_bridges(self) -> list[Bridge]:
        out, self._bridges = self._bridges, []
        return out
