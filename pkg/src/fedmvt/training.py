"""Parties, the per-step training protocol, the trainers and evaluation.

Party A holds the labels, ``f_A`` and the federated head ``f_AB`` and
computes every label-dependent loss.  Party B holds ``f_B``; it receives the
B-side columns of the enlarged training set, returns ``f_B``'s predictions,
and gets their gradient back.  Only representations, predictions, loss
scalars and gradients cross the boundary.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from fedmvt import tensor as T
from fedmvt.boundary import (
    AuditReport,
    BoundaryChannel,
    BoundaryLedger,
    Direction,
    MessageKind,
    audit_ledger,
)
from fedmvt.data import TestSplit, TriBatch, VerticalDataset, tri_batches
from fedmvt.estimation import (
    EstimateUnavailable,
    RepresentationPair,
    estimate_missing,
    overlap_distance_loss,
)
from fedmvt.nn import (
    RepresentationNet,
    SoftmaxClassifier,
    forward_classifier,
    forward_net,
    init_params,
    sgd_step,
    submodel_seed,
)
from fedmvt.objective import (
    LossReport,
    LossWeights,
    loss_classifier,
    loss_orthogonality,
    loss_shared_alignment,
    total_objective,
)
from fedmvt.pseudo import PseudoCandidates, build_training_sets, select
from fedmvt.tensor import GradMap, Tape, Tensor

log = logging.getLogger(__name__)

A_TO_B, B_TO_A = Direction.A_TO_B, Direction.B_TO_A
REPR, SCALAR = MessageKind.REPR_FORWARD, MessageKind.LOSS_SCALAR_REPORT


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_ol: int = 32
    batch_a: int = 64
    batch_b: int = 64
    hidden: tuple[int, ...] = (32,)
    dim_a: int = 32
    dim_b: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    threshold: float = 0.7
    select_rule: str = "all"
    local_sets: str = "with_pseudo"
    orthogonality: str = "inner"
    pool: str = "batch"
    exclude_self: bool = False
    vanilla_heads: str = "fed"
    split: bool = True
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if not self.lr > 0:
            errors.append("lr must be > 0")
        if min(self.dim_a, self.dim_b) < 1:
            errors.append("representation widths must be >= 1")
        elif self.dim_a != self.dim_b:
            # shared representations of both parties live in one space
            errors.append(f"dim_a and dim_b must be equal, got {self.dim_a} and {self.dim_b}")
        if min(self.batch_ol, self.batch_a, self.batch_b) < 1:
            errors.append("batch sizes must be >= 1")
        if not 0 < self.threshold <= 1:
            errors.append("threshold must lie in (0, 1]")
        for name, value, allowed in (
            ("select_rule", self.select_rule, ("all", "any")),
            ("local_sets", self.local_sets, ("with_pseudo", "ground_truth")),
            ("orthogonality", self.orthogonality, ("inner", "outer")),
            ("pool", self.pool, ("batch", "full")),
            ("vanilla_heads", self.vanilla_heads, ("fed", "all")),
        ):
            if value not in allowed:
                errors.append(f"{name} must be one of {allowed}, got {value!r}")
        if errors:
            raise ConfigurationError("; ".join(errors))


# ---------------------------------------------------------------------------
# parties
# ---------------------------------------------------------------------------


class _Party:
    name = "?"

    def __init__(self, dim_in: int, rep_dim: int, hidden: Iterable[int], seed: int):
        hidden = tuple(hidden)
        self.h_u = RepresentationNet.mlp(dim_in, hidden, rep_dim)
        self.h_c = RepresentationNet.mlp(dim_in, hidden, rep_dim)
        init_params(self.h_u, submodel_seed(seed, f"{self.name}.h_u"))
        init_params(self.h_c, submodel_seed(seed, f"{self.name}.h_c"))

    def represent(self, x: Tensor) -> RepresentationPair:
        return RepresentationPair(forward_net(self.h_u, x), forward_net(self.h_c, x), self.name)

    def submodels(self) -> dict:
        raise NotImplementedError

    def params(self) -> list[Tensor]:
        return [p for m in self.submodels().values() for p in m.params()]


class PartyA(_Party):
    """Label owner and coordinator."""

    name = "A"

    def __init__(self, dim_in: int, num_classes: int, cfg: TrainConfig, seed: int):
        super().__init__(dim_in, cfg.dim_a, cfg.hidden, seed)
        self.f_A = SoftmaxClassifier.create(2 * cfg.dim_a, num_classes)
        self.f_AB = SoftmaxClassifier.create(2 * cfg.dim_a + 2 * cfg.dim_b, num_classes)
        init_params(self.f_A, submodel_seed(seed, "A.f_A"))
        init_params(self.f_AB, submodel_seed(seed, "A.f_AB"))

    def submodels(self) -> dict:
        return {"h_u^A": self.h_u, "h_c^A": self.h_c, "f^A": self.f_A, "f^AB": self.f_AB}


class PartyB(_Party):
    name = "B"

    def __init__(self, dim_in: int, num_classes: int, cfg: TrainConfig, seed: int):
        super().__init__(dim_in, cfg.dim_b, cfg.hidden, seed)
        self.f_B = SoftmaxClassifier.create(2 * cfg.dim_b, num_classes)
        init_params(self.f_B, submodel_seed(seed, "B.f_B"))

    def submodels(self) -> dict:
        return {"h_u^B": self.h_u, "h_c^B": self.h_c, "f^B": self.f_B}


@dataclass
class TrainedModels:
    party_a: PartyA
    party_b: PartyB | None = None

    def params(self) -> list[Tensor]:
        out = self.party_a.params()
        if self.party_b is not None:
            out += self.party_b.params()
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]


def make_parties(ds: VerticalDataset, cfg: TrainConfig, with_b: bool = True) -> TrainedModels:
    a = PartyA(ds.dim_a, ds.num_classes, cfg, cfg.seed)
    b = PartyB(ds.dim_b, ds.num_classes, cfg, cfg.seed) if with_b else None
    return TrainedModels(a, b)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def _rows(*parts: Tensor | None) -> Tensor | None:
    present = [p for p in parts if p is not None]
    return T.concat_samples(present) if present else None


def _stack_pairs(*pairs: RepresentationPair | None) -> RepresentationPair | None:
    present = [p for p in pairs if p is not None]
    if not present:
        return None
    return RepresentationPair(
        T.concat_samples([p.unique for p in present]),
        T.concat_samples([p.shared for p in present]),
        present[0].party,
        present[0].origin,
    )


class Federation:
    """Runs training steps for one of three protocols over a pair of parties.

    ``mode`` is ``"fedmvt"``, ``"vanilla_vfl"`` or ``"vanilla_local"``.
    """

    def __init__(
        self,
        models: TrainedModels,
        cfg: TrainConfig,
        mode: str = "fedmvt",
        dataset: VerticalDataset | None = None,
        ledger: BoundaryLedger | None = None,
    ):
        if mode not in ("fedmvt", "vanilla_vfl", "vanilla_local"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode != "vanilla_local" and models.party_b is None:
            raise ConfigurationError(f"{mode} needs party B")
        if cfg.pool == "full" and mode == "fedmvt" and dataset is None:
            raise ConfigurationError("pool=full needs the dataset")
        self.models = models
        self.cfg = cfg
        self.mode = mode
        self.dataset = dataset
        self.channel = BoundaryChannel(ledger, split=cfg.split)
        if cfg.split:
            self.tape_a, self.tape_b = Tape("A"), Tape("B")
        else:
            self.tape_a = self.tape_b = Tape("joint")
        self.step_count = 0

    @property
    def ledger(self) -> BoundaryLedger:
        return self.channel.ledger

    # -- transport helpers -------------------------------------------------

    def _b_to_a(self, t: Tensor, kind=REPR, differentiable=True) -> Tensor:
        return self.channel.send(t, kind, B_TO_A, self.tape_b, self.tape_a, differentiable)

    def _a_to_b(self, t: Tensor, kind=REPR, differentiable=True) -> Tensor:
        return self.channel.send(t, kind, A_TO_B, self.tape_a, self.tape_b, differentiable)

    def _pair_to_a(self, pair: RepresentationPair | None) -> RepresentationPair | None:
        if pair is None:
            return None
        return RepresentationPair(self._b_to_a(pair.unique), self._b_to_a(pair.shared), "B")

    # -- protocol ----------------------------------------------------------

    def step_gradients(self, batch: TriBatch) -> tuple[GradMap, GradMap, LossReport]:
        """Forward and backward for one mini-batch; parameters are not touched."""
        self.tape_a.clear()
        self.tape_b.clear()
        self.channel.step = self.step_count
        if self.cfg.split and self.mode != "vanilla_local":
            for p_name, party in (("A", self.models.party_a), ("B", self.models.party_b)):
                for sub, module in party.submodels().items():
                    for k, p in enumerate(module.params()):
                        self.ledger.forbid_matrix(p.values, f"{sub} param {k} @ step {self.step_count}")

        if self.mode == "vanilla_local":
            total, report = self._forward_local(batch)
        else:
            total, report = self._forward_federated(batch)

        a_params = self.models.party_a.params()
        b_params = self.models.party_b.params() if self.models.party_b is not None else []
        seeds = [(self.tape_a, total, np.ones((1, 1)))]
        if self.tape_a is self.tape_b:
            (g,) = T.backward_joint([self.tape_a], seeds, wrt=[a_params + b_params])
            grads_a = grads_b = g
        else:
            grads_a, grads_b = T.backward_joint(
                [self.tape_a, self.tape_b], seeds, self.channel.take_bridges(), wrt=[a_params, b_params]
            )
        return grads_a, grads_b, report

    def run_step(self, batch: TriBatch) -> LossReport:
        grads_a, grads_b, report = self.step_gradients(batch)
        sgd_step(self.models.party_a.params(), grads_a, self.cfg.lr)
        if self.models.party_b is not None:
            sgd_step(self.models.party_b.params(), grads_b, self.cfg.lr)
        self.step_count += 1
        return report

    def _forward_local(self, batch: TriBatch):
        A = self.models.party_a
        with self.tape_a:
            x = _rows(batch.ol_xa, batch.a_nl_x)
            y = _rows(batch.ol_y, batch.a_nl_y)
            if x is None:
                raise ConfigurationError("party A has no labelled rows in this batch")
            l_a = loss_classifier(A.f_A, A.represent(x).full(), y)
            total, report = total_objective({"L_A": l_a}, LossWeights.zeros())
        return total, report

    def _forward_federated(self, batch: TriBatch):
        cfg, A, B = self.cfg, self.models.party_a, self.models.party_b
        fedmvt = self.mode == "fedmvt"
        heads_all = fedmvt or cfg.vanilla_heads == "all"
        if batch.n_ol == 0:
            raise ConfigurationError("batch has no overlap rows")
        use_b_nl = fedmvt and batch.n_b > 0
        use_a_nl = fedmvt and batch.n_a > 0
        full_pool = fedmvt and cfg.pool == "full"
        ds = self.dataset

        # party B: representations, its own orthogonality term, f_B's votes
        with self.tape_b:
            rb_ol = B.represent(batch.ol_xb)
            rb_nl = B.represent(batch.b_nl_x) if use_b_nl else None
            l_b_orth = None
            if fedmvt:
                rb_all = _stack_pairs(rb_ol, rb_nl)
                l_b_orth = loss_orthogonality(rb_all.unique, rb_all.shared, cfg.orthogonality)
            votes_b = None
            if use_b_nl:
                with T.no_grad():
                    votes_b = forward_classifier(B.f_B, T.detach(rb_nl.full()))
            if full_pool:
                rb_pool = forward_net(B.h_c, Tensor(ds.features_b))
                rb_anchor = B.represent(Tensor(ds.features_b[ds.overlap_pairs[:, 1]]))

        rb_ol_a = self._pair_to_a(rb_ol)
        rb_nl_a = self._pair_to_a(rb_nl)
        l_b_orth_a = self._b_to_a(l_b_orth, SCALAR) if l_b_orth is not None else None
        votes_b_a = self._b_to_a(votes_b, differentiable=False) if votes_b is not None else None
        if full_pool:
            rb_pool_a = self._b_to_a(rb_pool)
            rb_anchor_a = self._pair_to_a(rb_anchor)

        comps: dict[str, Tensor | None] = {}
        extras: dict = {"n_ol": batch.n_ol, "n_a_nl": batch.n_a if fedmvt else 0,
                        "n_b_nl": batch.n_b if fedmvt else 0, "n_selected": 0}
        with self.tape_a:
            ra_ol = A.represent(batch.ol_xa)
            ra_nl = A.represent(batch.a_nl_x) if use_a_nl else None
            rt_a_nl = rt_b_nl = None
            if fedmvt:
                if full_pool:
                    pool_a = forward_net(A.h_c, Tensor(ds.features_a))
                    pool_b = rb_pool_a
                    anc_a = A.represent(Tensor(ds.features_a[ds.overlap_pairs[:, 0]]))
                    anc_b = rb_anchor_a
                    pairs = ds.overlap_pairs[batch.ol_index]
                    idx_anchor, idx_pool_a, idx_pool_b = batch.ol_index, pairs[:, 0], pairs[:, 1]
                else:
                    pool_a = _rows(ra_ol.shared, ra_nl.shared if ra_nl else None)
                    pool_b = _rows(rb_ol_a.shared, rb_nl_a.shared if rb_nl_a else None)
                    anc_a, anc_b = ra_ol, rb_ol_a
                    idx_anchor = idx_pool_a = idx_pool_b = None

                if rb_nl_a is not None:
                    rt_a_nl = estimate_missing("A", rb_nl_a, anc_b, anc_a, pool_a)
                if ra_nl is not None:
                    rt_b_nl = estimate_missing("B", ra_nl, anc_a, anc_b, pool_b)
                try:
                    rt_a_ol = estimate_missing(
                        "A", rb_ol_a, anc_b, anc_a, pool_a, cfg.exclude_self, idx_anchor, idx_pool_a
                    )
                    comps["L_A_dist"] = overlap_distance_loss(rt_a_ol.full(), ra_ol.full())
                    rt_b_ol = estimate_missing(
                        "B", ra_ol, anc_a, anc_b, pool_b, cfg.exclude_self, idx_anchor, idx_pool_b
                    )
                    comps["L_B_dist"] = overlap_distance_loss(rt_b_ol.full(), rb_ol_a.full())
                except EstimateUnavailable:
                    comps.pop("L_A_dist", None)
                comps["L_AB_dist"] = loss_shared_alignment(ra_ol.shared, rb_ol_a.shared)
                ra_all = _stack_pairs(ra_ol, ra_nl)
                comps["L_A_orth"] = loss_orthogonality(ra_all.unique, ra_all.shared, cfg.orthogonality)
                comps["L_B_orth"] = l_b_orth_a

            selection = None
            if rt_a_nl is not None:
                with T.no_grad():
                    ra_tilde = T.detach(rt_a_nl.full())
                    rb_plain = T.detach(rb_nl_a.full())
                    candidates = PseudoCandidates(
                        forward_classifier(A.f_A, ra_tilde),
                        votes_b_a,
                        forward_classifier(A.f_AB, T.concat_features(rb_plain, ra_tilde)),
                    )
                selection = select(candidates, cfg.threshold, cfg.select_rule)
                extras["n_selected"] = int(len(selection[0]))

            chi = build_training_sets(
                (rb_ol_a.full(), ra_ol.full(), batch.ol_y),
                (rt_b_nl.full(), ra_nl.full(), batch.a_nl_y) if rt_b_nl is not None else None,
                (rb_nl_a.full(), rt_a_nl.full()) if rt_a_nl is not None else None,
                selection,
                cfg.local_sets,
            )
            comps["L_fed"] = loss_classifier(A.f_AB, chi.chi_full.reps, chi.chi_full.labels)
            if heads_all:
                comps["L_A"] = loss_classifier(A.f_A, chi.chi_A.reps, chi.chi_A.labels)

        if heads_all:
            chi_b_at_b = self._a_to_b(chi.chi_B.reps)
            with self.tape_b:
                pred_b = forward_classifier(B.f_B, chi_b_at_b)
            pred_b_a = self._b_to_a(pred_b)
            with self.tape_a:
                comps["L_B"] = T.cross_entropy_mean(pred_b_a, chi.chi_B.labels)

        with self.tape_a:
            total, report = total_objective(comps, cfg.weights)
        self._a_to_b(T.detach(total), SCALAR, differentiable=False)
        report.extras = extras
        return total, report


# ---------------------------------------------------------------------------
# evaluation and trainers
# ---------------------------------------------------------------------------


def evaluate(models: TrainedModels, test: TestSplit) -> dict[str, float]:
    """Top-1 accuracy (percent) of every head the models have."""
    if len(test.features_a) == 0:
        raise ValueError("empty test split")
    truth = test.labels.argmax(axis=1)
    A, B = models.party_a, models.party_b
    out = {}
    with T.no_grad():
        ra = A.represent(Tensor(test.features_a)).full()
        out_probs = {"fA": forward_classifier(A.f_A, ra)}
        if B is not None:
            rb = B.represent(Tensor(test.features_b)).full()
            out_probs["fB"] = forward_classifier(B.f_B, rb)
            out_probs["fAB"] = forward_classifier(A.f_AB, T.concat_features(rb, ra))
    for head, probs in out_probs.items():
        out[head] = 100.0 * float(np.mean(probs.values.argmax(axis=1) == truth))
    return out


@dataclass
class TrainResult:
    models: TrainedModels
    history: list[dict]
    step_reports: list[LossReport]
    ledger: BoundaryLedger
    mode: str
    wall_clock: float = 0.0

    def audit(self) -> AuditReport:
        return audit_ledger(self.ledger)

    def final_accuracy(self) -> dict[str, float]:
        return self.history[-1]["accuracy"] if self.history else {}


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 0x5EED, epoch]).generate_state(1)[0])


def _fit(
    ds: VerticalDataset,
    cfg: TrainConfig,
    mode: str,
    test: TestSplit | None,
    models: TrainedModels | None = None,
) -> TrainResult:
    start = time.perf_counter()
    if models is None:
        models = make_parties(ds, cfg, with_b=mode != "vanilla_local")
    ledger = BoundaryLedger()
    if mode != "vanilla_local":
        if ds.n_overlap == 0:
            raise ConfigurationError(f"{mode} needs overlapping samples, dataset has none")
        ledger.forbid_rows(ds.features_a, "raw features A")
        ledger.forbid_rows(ds.features_b, "raw features B")
        ledger.forbid_rows(ds.labels_a, "labels A")
    fed = Federation(models, cfg, mode, ds, ledger)
    history: list[dict] = []
    reports: list[LossReport] = []
    for epoch in range(cfg.epochs):
        epoch_reports = [
            fed.run_step(b)
            for b in tri_batches(ds, cfg.batch_ol, cfg.batch_a, cfg.batch_b, epoch_seed(cfg.seed, epoch))
        ]
        reports.extend(epoch_reports)
        row = {
            "epoch": epoch + 1,
            "steps": len(epoch_reports),
            "loss": {
                k: float(np.mean([getattr(r, k) for r in epoch_reports])) if epoch_reports else 0.0
                for k in ("total",) + tuple(LossReport().components())
            },
            "n_selected": int(sum(r.extras.get("n_selected", 0) for r in epoch_reports)),
            "n_unlabeled": int(sum(r.extras.get("n_b_nl", 0) for r in epoch_reports)),
            "accuracy": evaluate(models, test) if test is not None else {},
        }
        history.append(row)
        log.debug("%s epoch %d: %s", mode, epoch + 1, row)
    return TrainResult(models, history, reports, ledger, mode, time.perf_counter() - start)


def train(ds: VerticalDataset, cfg: TrainConfig, test: TestSplit | None = None, **kw) -> TrainResult:
    """FedMVT training: K epochs of the full three-view protocol."""
    if ds.n_overlap == 0:
        raise ConfigurationError("FedMVT needs overlapping samples to anchor unique estimation")
    return _fit(ds, cfg, "fedmvt", test, **kw)


def train_vanilla_vfl(ds: VerticalDataset, cfg: TrainConfig, test: TestSplit | None = None, **kw) -> TrainResult:
    """Federated head on overlapping samples only (same batch stream, nl parts ignored)."""
    return _fit(ds, cfg, "vanilla_vfl", test, **kw)


def train_vanilla_local(ds: VerticalDataset, cfg: TrainConfig, test: TestSplit | None = None, **kw) -> TrainResult:
    """Party A alone on all its labelled rows; nothing crosses the boundary."""
    return _fit(ds, cfg, "vanilla_local", test, **kw)
