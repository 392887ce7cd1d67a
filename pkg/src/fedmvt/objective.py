"""Loss terms and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from fedmvt import tensor as T
from fedmvt.nn import SoftmaxClassifier, forward_classifier
from fedmvt.tensor import Tensor

# component name -> weight name; the three classifier losses carry unit weight
WEIGHTED = {
    "L_A_dist": "lambda1",
    "L_B_dist": "lambda2",
    "L_AB_dist": "lambda3",
    "L_A_orth": "lambda4",
    "L_B_orth": "lambda5",
}
UNIT = ("L_fed", "L_A", "L_B")
COMPONENTS = UNIT + tuple(WEIGHTED)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    lambda4: float = 0.1
    lambda5: float = 0.1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def weight_of(self, component: str) -> float:
        return 1.0 if component in UNIT else getattr(self, WEIGHTED[component])


@dataclass
class LossReport:
    total: float = 0.0
    L_fed: float = 0.0
    L_A: float = 0.0
    L_B: float = 0.0
    L_AB_dist: float = 0.0
    L_A_orth: float = 0.0
    L_B_orth: float = 0.0
    L_A_dist: float = 0.0
    L_B_dist: float = 0.0
    skipped: tuple[str, ...] = ()
    extras: dict = field(default_factory=dict)

    def components(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in COMPONENTS}

    def weighted_sum(self, w: LossWeights) -> float:
        return sum(w.weight_of(c) * v for c, v in self.components().items())


def loss_shared_alignment(rc_a_ol: Tensor, rc_b_ol: Tensor) -> Tensor:
    return T.mean_sq_row_distance(rc_a_ol, rc_b_ol)


def loss_orthogonality(ru: Tensor, rc: Tensor, variant: str = "inner") -> Tensor:
    """Mean squared per-row inner product.  ``variant="outer"`` gives the
    Frobenius norm of the per-row outer product instead."""
    if variant == "inner":
        return T.mean_sq_row_dot(ru, rc)
    if variant == "outer":
        return T.mean_sq_row_outer(ru, rc)
    raise ValueError(f"unknown orthogonality variant {variant!r}")


def loss_classifier(f: SoftmaxClassifier, reps: Tensor, labels: Tensor) -> Tensor:
    return T.cross_entropy_mean(forward_classifier(f, reps), labels)


def total_objective(
    components: dict[str, Tensor | None], w: LossWeights
) -> tuple[Tensor, LossReport]:
    """Weighted sum of whatever components are present.

    Missing or ``None`` components contribute 0 and are listed in
    ``report.skipped``.
    """
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    report = LossReport()
    skipped = []
    total: Tensor | None = None
    for name in COMPONENTS:
        term = components.get(name)
        if term is None:
            skipped.append(name)
            continue
        if term.shape != (1, 1):
            raise T.ShapeError(f"{name} must be a scalar, got {term.shape}")
        setattr(report, name, term.item())
        weighted = term if name in UNIT else T.scale(term, w.weight_of(name))
        total = weighted if total is None else T.add(total, weighted)
    if total is None:
        total = Tensor([[0.0]])
    report.total = total.item()
    report.skipped = tuple(skipped)
    return total, report
