"""Parameter-free attention estimators for a missing party's representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedmvt import tensor as T
from fedmvt.tensor import ShapeError, Tensor

# additive mask value; exp() of it underflows to exactly 0
_MASKED = -1e30


class EstimateUnavailable(ValueError):
    """No overlap anchors exist to map unique representations across parties."""


@dataclass
class RepresentationPair:
    unique: Tensor
    shared: Tensor
    party: str
    origin: str = "learned"

    def __post_init__(self):
        if self.party not in ("A", "B"):
            raise ValueError(f"party must be 'A' or 'B', got {self.party!r}")
        if self.origin not in ("learned", "estimated"):
            raise ValueError(f"origin must be 'learned' or 'estimated', got {self.origin!r}")
        if self.unique.shape != self.shared.shape:
            raise ShapeError(
                f"unique {self.unique.shape} and shared {self.shared.shape} shapes differ"
            )

    @property
    def rows(self) -> int:
        return self.unique.shape[0]

    def full(self) -> Tensor:
        """[unique ; shared] along the feature axis."""
        return T.concat_features(self.unique, self.shared)


def self_mask(m: int, n: int, cols=None) -> Tensor:
    """Bar query i from key ``cols[i]`` (default: key i)."""
    cols = np.arange(m) if cols is None else np.asarray(cols, dtype=np.int64)
    if len(cols) != m or (m and (cols.min() < 0 or cols.max() >= n)):
        raise ShapeError(f"self_mask: cannot align {m} queries with {n} keys")
    mask = np.zeros((m, n))
    mask[np.arange(m), cols] = _MASKED
    return Tensor(mask)


def attention_weights(queries: Tensor, keys: Tensor, mask: Tensor | None = None) -> Tensor:
    """softmax(queries · keysᵀ / √d), rows over keys."""
    if queries.shape[1] != keys.shape[1]:
        raise ShapeError(
            f"attention: query width {queries.shape[1]} != key width {keys.shape[1]}"
        )
    if keys.shape[0] < 1:
        raise EstimateUnavailable("attention needs at least one key")
    d = queries.shape[1]
    scores = T.scale(T.matmul(queries, T.transpose(keys)), 1.0 / np.sqrt(d))
    if mask is not None:
        if ((mask.values > _MASKED / 2).sum(axis=1) < 1).any():
            raise EstimateUnavailable("mask leaves no key to attend to")
        scores = T.add(scores, mask)
    return T.softmax_rows(scores)


def estimate_shared(queries: Tensor, keys_values: Tensor, mask: Tensor | None = None) -> Tensor:
    """Retrieve from the other party's shared space: keys and values are the same rows."""
    return T.matmul(attention_weights(queries, keys_values, mask), keys_values)


def estimate_unique(
    queries: Tensor, keys: Tensor, values: Tensor, mask: Tensor | None = None
) -> Tensor:
    """Similarities against the querying party's overlap rows, applied to the
    other party's rows for those same samples."""
    if keys.shape[0] == 0:
        raise EstimateUnavailable("no overlap anchors for unique estimation")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(
            f"estimate_unique: {keys.shape[0]} keys but {values.shape[0]} value rows"
        )
    return T.matmul(attention_weights(queries, keys, mask), values)


def estimate_missing(
    for_party: str,
    source: RepresentationPair,
    source_anchors: RepresentationPair,
    target_anchors: RepresentationPair,
    pool: Tensor,
    exclude_self: bool = False,
    anchor_index=None,
    pool_index=None,
) -> RepresentationPair:
    """Estimate ``for_party``'s representation of the samples in ``source``.

    ``source`` belongs to the other party.  ``source_anchors`` and
    ``target_anchors`` are the two parties' overlap representations (row
    aligned); ``pool`` holds ``for_party``'s shared representations to
    retrieve from.  With ``exclude_self`` the source rows are the overlap
    samples themselves and each query is barred from retrieving its own
    counterpart, located at ``anchor_index``/``pool_index`` (default: the
    first rows).
    """
    if source.party == for_party:
        raise ValueError("source must belong to the other party")
    if source_anchors.rows != target_anchors.rows:
        raise ShapeError("anchor sets are not row aligned")
    if source_anchors.rows == 0:
        raise EstimateUnavailable("no overlap anchors for unique estimation")
    uniq_mask = shared_mask = None
    if exclude_self:
        uniq_mask = self_mask(source.rows, source_anchors.rows, anchor_index)
        shared_mask = self_mask(source.rows, pool.shape[0], pool_index)
    unique = estimate_unique(source.unique, source_anchors.unique, target_anchors.unique, uniq_mask)
    shared = estimate_shared(source.shared, pool, shared_mask)
    return RepresentationPair(unique, shared, party=for_party, origin="estimated")


def overlap_distance_loss(estimated: Tensor, learned: Tensor) -> Tensor:
    return T.mean_sq_row_distance(estimated, learned)
