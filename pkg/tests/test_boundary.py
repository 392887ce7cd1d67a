import numpy as np
import pytest

from fedmvt import tensor as T
from fedmvt.boundary import (
    ALLOWED_KINDS,
    BoundaryChannel,
    BoundaryLedger,
    BoundaryMessage,
    Direction,
    MessageKind,
    audit_ledger,
    decode_message,
    encode_message,
    fingerprint,
)
from fedmvt.tensor import Tensor


def test_three_kinds():
    assert ALLOWED_KINDS == {"ReprForward", "GradBackward", "LossScalarReport"}


@pytest.mark.parametrize("kind", list(MessageKind))
@pytest.mark.parametrize("direction", list(Direction))
def test_wire_round_trip(kind, direction):
    vals = np.random.default_rng(0).normal(size=(3, 5))
    msg = BoundaryMessage(kind, Tensor(vals), 17, direction)
    back = decode_message(encode_message(msg))
    assert back.kind is kind and back.direction is direction and back.step == 17
    assert back.payload.values.tobytes() == vals.tobytes()


def test_decode_rejects_garbage():
    msg = encode_message(BoundaryMessage(MessageKind.REPR_FORWARD, Tensor(np.ones((2, 2))), 0, Direction.A_TO_B))
    with pytest.raises(ValueError):
        decode_message(msg[:-8])
    with pytest.raises(ValueError):
        decode_message(b"XXXX" + msg[4:])
    with pytest.raises(ValueError):
        decode_message(b"FM")


def test_fingerprint_is_content_hash():
    a = np.arange(6, dtype=float).reshape(2, 3)
    assert fingerprint(a) == fingerprint(a.copy())
    assert fingerprint(a) != fingerprint(a + np.eye(2, 3) * 1e-12)
    assert fingerprint(np.asfortranarray(a)) == fingerprint(a)


class TestAudit:
    def _ledger(self):
        led = BoundaryLedger()
        led.forbid_rows(np.array([[1.0, 2.0], [3.0, 4.0]]), "raw")
        led.forbid_matrix(np.array([[5.0, 6.0]]), "weight")
        return led

    def test_clean_passes(self):
        led = self._ledger()
        led.record(BoundaryMessage(MessageKind.REPR_FORWARD, Tensor([[9.0, 9.0]]), 0, Direction.B_TO_A))
        rep = audit_ledger(led)
        assert rep.passed and rep.n_messages == 1 and rep.summary().startswith("PASS")

    def test_raw_row_fails_with_step(self):
        led = self._ledger()
        led.record(BoundaryMessage(MessageKind.REPR_FORWARD, Tensor([[0.0, 1.0], [3.0, 4.0]]), 7, Direction.B_TO_A))
        rep = audit_ledger(led)
        assert not rep.passed
        assert rep.violations[0].step == 7 and "raw[1]" in rep.violations[0].reason
        assert "step 7" in rep.summary()

    def test_parameter_matrix_fails(self):
        led = self._ledger()
        led.record(BoundaryMessage(MessageKind.GRAD_BACKWARD, Tensor([[5.0, 6.0]]), 3, Direction.A_TO_B))
        assert "weight" in audit_ledger(led).violations[0].reason

    def test_unknown_kind_fails(self):
        led = self._ledger()
        led.record_raw(4, "AtoB", "ParamSync", np.ones((1, 1)))
        rep = audit_ledger(led)
        assert not rep.passed and rep.violations[0].step == 4

    def test_zero_rows_ignored(self):
        led = BoundaryLedger()
        led.forbid_rows(np.zeros((1, 2)), "raw")
        led.record(BoundaryMessage(MessageKind.REPR_FORWARD, Tensor(np.zeros((1, 2))), 0, Direction.B_TO_A))
        assert audit_ledger(led).passed

    def test_empty_ledger_passes(self):
        assert audit_ledger(BoundaryLedger()).passed

    def test_entries_are_immutable(self):
        led = self._ledger()
        led.record(BoundaryMessage(MessageKind.REPR_FORWARD, Tensor([[1.0]]), 0, Direction.B_TO_A))
        with pytest.raises(Exception):
            led.entries[0].step = 3
        assert isinstance(led.entries, tuple)


class TestChannel:
    def test_split_send_logs_and_bridges(self):
        ch = BoundaryChannel()
        ta, tb = T.Tape("A"), T.Tape("B")
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with tb:
            r = T.scale(x, 3.0)
        got = ch.send(r, MessageKind.REPR_FORWARD, Direction.B_TO_A, tb, ta)
        assert got is not r and got.requires_grad
        assert len(ch.ledger) == 1
        with ta:
            loss = T.sum_all(got)
        (ga, gb) = T.backward_joint([ta, tb], [(ta, loss, np.ones((1, 1)))], ch.take_bridges(), wrt=[[], [x]])
        np.testing.assert_array_equal(gb[x.node].values, 3.0)
        kinds = [e.kind for e in ch.ledger.entries]
        assert kinds == ["ReprForward", "GradBackward"]
        assert ch.ledger.entries[1].direction == "AtoB"

    def test_detached_send_has_no_bridge(self):
        ch = BoundaryChannel()
        ta, tb = T.Tape("A"), T.Tape("B")
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        got = ch.send(x, MessageKind.LOSS_SCALAR_REPORT, Direction.A_TO_B, ta, tb, differentiable=False)
        assert not got.requires_grad and ch.take_bridges() == []

    def test_gradients_not_sent_directly(self):
        ch = BoundaryChannel()
        with pytest.raises(ValueError):
            ch.send(Tensor([[1.0]]), MessageKind.GRAD_BACKWARD, Direction.A_TO_B, T.Tape(), T.Tape())

    def test_monolithic_passthrough(self):
        ch = BoundaryChannel(split=False)
        x = Tensor([[1.0]], requires_grad=True)
        tape = T.Tape()
        assert ch.send(x, MessageKind.REPR_FORWARD, Direction.B_TO_A, tape, tape) is x
        assert len(ch.ledger) == 0
