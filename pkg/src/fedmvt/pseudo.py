"""Three-view pseudo-labelling and construction of the enlarged training set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedmvt import tensor as T
from fedmvt.nn import SoftmaxClassifier, forward_classifier
from fedmvt.tensor import ShapeError, Tensor

GROUND_TRUTH = "ground-truth"
PSEUDO = "pseudo"


@dataclass
class PseudoCandidates:
    dist_fA: Tensor
    dist_fB: Tensor
    dist_fAB: Tensor

    def __post_init__(self):
        shapes = {self.dist_fA.shape, self.dist_fB.shape, self.dist_fAB.shape}
        if len(shapes) != 1:
            raise ShapeError(f"candidate distributions disagree in shape: {sorted(shapes)}")

    @property
    def rows(self) -> int:
        return self.dist_fA.shape[0]

    def stacked(self) -> np.ndarray:
        """(3, m, C) array in the order fA, fB, fAB."""
        return np.stack([self.dist_fA.values, self.dist_fB.values, self.dist_fAB.values])


def candidate_labels(
    fA: SoftmaxClassifier,
    fB: SoftmaxClassifier,
    fAB: SoftmaxClassifier,
    r_tilde_a: Tensor,
    r_b: Tensor,
) -> PseudoCandidates:
    """Class distributions of the three heads on unlabeled B-only rows.

    Runs without recording, so nothing downstream can send gradient into
    label generation.
    """
    with T.no_grad():
        ra, rb = T.detach(r_tilde_a), T.detach(r_b)
        return PseudoCandidates(
            forward_classifier(fA, ra),
            forward_classifier(fB, rb),
            forward_classifier(fAB, T.concat_features(rb, ra)),
        )


def select(
    candidates: PseudoCandidates, t: float, rule: str = "all"
) -> tuple[np.ndarray, np.ndarray]:
    """Rows where at least two heads agree on the argmax class with confidence.

    ``rule="all"``: every agreeing head's top probability must exceed ``t``.
    ``rule="any"``: one agreeing head exceeding ``t`` suffices.
    Returns (selected row indices, one-hot labels).
    """
    if rule not in ("all", "any"):
        raise ValueError(f"unknown selection rule {rule!r}")
    probs = candidates.stacked()
    _, m, C = probs.shape
    top = probs.argmax(axis=2)  # (3, m); ties go to the lowest class
    conf = probs.max(axis=2)
    # with three voters, two agreeing means the median vote is the majority label
    majority = np.where(top[0] == top[1], top[0], top[2])
    agree = top == majority[None, :]
    n_agree = agree.sum(axis=0)
    above = conf > t
    if rule == "all":
        ok = np.all(above | ~agree, axis=0)
    else:
        ok = np.any(above & agree, axis=0)
    chosen = np.flatnonzero((n_agree >= 2) & ok)
    labels = np.zeros((len(chosen), C))
    labels[np.arange(len(chosen)), majority[chosen]] = 1.0
    return chosen, labels


@dataclass
class LabeledPart:
    reps: Tensor
    labels: Tensor
    provenance: np.ndarray

    @property
    def rows(self) -> int:
        return self.reps.shape[0]


@dataclass
class EnlargedTrainingSet:
    chi_ol: LabeledPart | None
    chi_a_nl: LabeledPart | None
    chi_b_nl_selected: LabeledPart | None
    chi_full: LabeledPart
    chi_A: LabeledPart
    chi_B: LabeledPart
    width_b: int
    width_a: int


def _combine(parts: list[LabeledPart]) -> LabeledPart:
    return LabeledPart(
        T.concat_samples([p.reps for p in parts]),
        T.concat_samples([p.labels for p in parts]),
        np.concatenate([p.provenance for p in parts]),
    )


def build_training_sets(
    ol: tuple[Tensor, Tensor, Tensor] | None,
    a_nl: tuple[Tensor, Tensor, Tensor] | None,
    b_nl: tuple[Tensor, Tensor] | None,
    selection: tuple[np.ndarray, np.ndarray] | None,
    local_sets: str = "with_pseudo",
) -> EnlargedTrainingSet:
    """Assemble χ = combine(overlap, A-only with estimated B, selected B-only).

    ``ol = (r_B, r_A, y)``, ``a_nl = (r̃_B, r_A, y)``, ``b_nl = (r_B, r̃_A)``.
    Every row of χ is laid out ``[B-side ; A-side]``; ``chi_A``/``chi_B`` are
    column slices of χ.  With ``local_sets="ground_truth"`` the per-party sets
    drop pseudo-labelled rows.
    """
    if local_sets not in ("with_pseudo", "ground_truth"):
        raise ValueError(f"unknown local_sets option {local_sets!r}")
    parts: list[LabeledPart] = []
    widths: set[tuple[int, int]] = set()

    def part(rb: Tensor, ra: Tensor, y: Tensor, prov: str) -> LabeledPart:
        if not rb.shape[0] == ra.shape[0] == y.shape[0]:
            raise ShapeError("training-set part row counts disagree")
        widths.add((rb.shape[1], ra.shape[1]))
        return LabeledPart(T.concat_features(rb, ra), y, np.full(rb.shape[0], prov, dtype=object))

    chi_ol = part(*ol, GROUND_TRUTH) if ol is not None else None
    chi_a = part(*a_nl, GROUND_TRUTH) if a_nl is not None else None
    chi_b = None
    if b_nl is not None and selection is not None and len(selection[0]):
        idx, labels = selection
        rb, ra = b_nl
        if idx.max() >= rb.shape[0] or idx.min() < 0:
            raise IndexError("selection index out of range")
        chi_b = part(T.take_rows(rb, idx), T.take_rows(ra, idx), Tensor(labels), PSEUDO)
    parts = [p for p in (chi_ol, chi_a, chi_b) if p is not None]
    if not parts:
        raise ValueError("no labelled rows to train on")
    if len(widths) != 1:
        raise ShapeError(f"inconsistent representation widths across parts: {sorted(widths)}")
    wb, wa = widths.pop()
    full = _combine(parts)

    local = full
    truth = [p for p in (chi_ol, chi_a) if p is not None]
    if local_sets == "ground_truth" and chi_b is not None and truth:
        local = _combine(truth)
    chi_B = LabeledPart(T.slice_cols(local.reps, 0, wb), local.labels, local.provenance)
    chi_A = LabeledPart(T.slice_cols(local.reps, wb, wb + wa), local.labels, local.provenance)
    return EnlargedTrainingSet(chi_ol, chi_a, chi_b, full, chi_A, chi_B, wb, wa)
