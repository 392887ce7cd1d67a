"""Vertically partitioned datasets: construction, CSV ingestion, batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from fedmvt.tensor import Tensor


class DataError(ValueError):
    pass


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class VerticalDataset:
    """Party A rows (features + one-hot labels), party B rows, and their alignment.

    ``overlap_pairs[k] = (i, j)`` says row ``i`` of A and row ``j`` of B are
    the same sample.  ``ids_a``/``ids_b`` are only carried for CSV round trips.
    """

    features_a: np.ndarray
    labels_a: np.ndarray
    features_b: np.ndarray
    overlap_pairs: np.ndarray
    nonoverlap_a: np.ndarray
    nonoverlap_b: np.ndarray
    ids_a: list[str] | None = None
    ids_b: list[str] | None = None
    feature_names_a: list[str] | None = None
    feature_names_b: list[str] | None = None
    class_values: list[str] | None = None

    def __post_init__(self):
        self.features_a = np.asarray(self.features_a, dtype=np.float64)
        self.labels_a = np.asarray(self.labels_a, dtype=np.float64)
        self.features_b = np.asarray(self.features_b, dtype=np.float64)
        self.overlap_pairs = np.asarray(self.overlap_pairs, dtype=np.int64).reshape(-1, 2)
        self.nonoverlap_a = np.asarray(self.nonoverlap_a, dtype=np.int64).reshape(-1)
        self.nonoverlap_b = np.asarray(self.nonoverlap_b, dtype=np.int64).reshape(-1)
        self.validate()

    @property
    def n_overlap(self) -> int:
        return len(self.overlap_pairs)

    @property
    def num_classes(self) -> int:
        return self.labels_a.shape[1]

    @property
    def dim_a(self) -> int:
        return self.features_a.shape[1]

    @property
    def dim_b(self) -> int:
        return self.features_b.shape[1]

    def validate(self) -> None:
        na, nb = len(self.features_a), len(self.features_b)
        if len(self.labels_a) != na:
            raise DataError("labels_a and features_a row counts differ")
        ol_a, ol_b = self.overlap_pairs[:, 0], self.overlap_pairs[:, 1]
        for side, ol, nl, n in (("A", ol_a, self.nonoverlap_a, na), ("B", ol_b, self.nonoverlap_b, nb)):
            if len(np.unique(ol)) != len(ol):
                raise DataError(f"duplicate overlap index on side {side}")
            both = np.concatenate([ol, nl])
            if both.size and (both.min() < 0 or both.max() >= n):
                raise DataError(f"index out of range on side {side}")
            if len(np.unique(both)) != len(both) or len(both) != n:
                raise DataError(f"overlap and non-overlap sets do not partition side {side}")
        if na:
            rows = self.labels_a
            if not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=1) == 1)):
                raise DataError("labels_a rows must be one-hot")

    def ol_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ia, ib = self.overlap_pairs[:, 0], self.overlap_pairs[:, 1]
        return self.features_a[ia], self.labels_a[ia], self.features_b[ib]


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _count(frac: float, n: int) -> int:
    # round first so that e.g. 0.0125 * 3200 does not ceil to 41
    return math.ceil(round(frac * n, 9))


def vertical_partition(
    features: np.ndarray,
    labels: np.ndarray,
    split_col: int,
    overlap_fraction: float,
    nl_fraction_a: float,
    nl_fraction_b: float,
    seed: int,
) -> VerticalDataset:
    """Cut a centralized dataset into the two-party virtual dataset.

    ``nl_fraction_a``/``nl_fraction_b`` are shares of the samples left after
    the overlap is drawn; anything not assigned to either pool is dropped.
    Labels of B-only samples are discarded.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n, width = features.shape
    if not 0 < split_col < width:
        raise ValueError(f"split_col must lie in (0, {width}), got {split_col}")
    if not 0 < overlap_fraction <= 1:
        raise ValueError(f"overlap_fraction must lie in (0, 1], got {overlap_fraction}")
    if nl_fraction_a < 0 or nl_fraction_b < 0 or nl_fraction_a + nl_fraction_b > 1 + 1e-12:
        raise ValueError("nl fractions must be non-negative and sum to at most 1")
    if len(labels) != n:
        raise ValueError("features and labels row counts differ")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_ol = min(_count(overlap_fraction, n), n)
    rest = n - n_ol
    n_a = min(int(math.floor(round(nl_fraction_a * rest, 9))), rest)
    n_b = min(int(math.floor(round(nl_fraction_b * rest, 9))), rest - n_a)
    ol = order[:n_ol]
    a_only = order[n_ol : n_ol + n_a]
    b_only = order[n_ol + n_a : n_ol + n_a + n_b]

    # each party stores its rows in its own shuffled order
    rows_a = np.concatenate([ol, a_only])
    rows_b = np.concatenate([ol, b_only])
    perm_a = rng.permutation(len(rows_a))
    perm_b = rng.permutation(len(rows_b))
    rows_a, rows_b = rows_a[perm_a], rows_b[perm_b]
    pos_a = {s: i for i, s in enumerate(rows_a)}
    pos_b = {s: i for i, s in enumerate(rows_b)}

    pairs = np.array([(pos_a[s], pos_b[s]) for s in ol], dtype=np.int64).reshape(-1, 2)
    return VerticalDataset(
        features_a=features[rows_a, :split_col],
        labels_a=labels[rows_a],
        features_b=features[rows_b, split_col:],
        overlap_pairs=pairs,
        nonoverlap_a=np.sort([pos_a[s] for s in a_only]).astype(np.int64),
        nonoverlap_b=np.sort([pos_b[s] for s in b_only]).astype(np.int64),
        ids_a=[str(s) for s in rows_a],
        ids_b=[str(s) for s in rows_b],
    )


def restrict_overlap(ds: VerticalDataset, n_overlap: int, seed: int) -> VerticalDataset:
    """Keep ``n_overlap`` aligned pairs; the rest fall back to the one-party pools."""
    if not 0 <= n_overlap <= ds.n_overlap:
        raise ValueError(f"n_overlap must lie in [0, {ds.n_overlap}], got {n_overlap}")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(ds.n_overlap)[:n_overlap])
    drop = np.setdiff1d(np.arange(ds.n_overlap), keep)
    pairs = ds.overlap_pairs[keep]
    return VerticalDataset(
        ds.features_a,
        ds.labels_a,
        ds.features_b,
        pairs,
        np.sort(np.concatenate([ds.nonoverlap_a, ds.overlap_pairs[drop, 0]])),
        np.sort(np.concatenate([ds.nonoverlap_b, ds.overlap_pairs[drop, 1]])),
        ds.ids_a,
        ds.ids_b,
        ds.feature_names_a,
        ds.feature_names_b,
        ds.class_values,
    )


def make_synthetic(
    n: int,
    dims: tuple[int, int],
    classes: int,
    class_sep: float,
    cross_view_corr: float,
    seed: int,
    latent_dim: int = 8,
    noise: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-view Gaussian class clusters.

    Each view is a random linear image of its own latent vector.  A view's
    latent is a class centre plus unit Gaussian noise; both the centres and
    the per-sample noise are mixed from a shared and a view-private source,
    with ``cross_view_corr`` the weight of the shared one.  Returns features
    ``n × (a + b)`` (A block first) and one-hot labels ``n × C``.
    """
    a, b = dims
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    if classes < 2 or a < 1 or b < 1:
        raise ValueError("need at least 2 classes and positive view widths")
    if not 0 <= cross_view_corr <= 1:
        raise ValueError("cross_view_corr must lie in [0, 1]")
    if class_sep < 0:
        raise ValueError("class_sep must be non-negative")

    rng = np.random.default_rng(seed)
    k = latent_dim
    rho = cross_view_corr
    w_shared, w_own = np.sqrt(rho), np.sqrt(1.0 - rho)

    def unit_rows(m):
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    centre_shared = unit_rows(rng.standard_normal((classes, k)))
    centre_a = unit_rows(w_shared * centre_shared + w_own * unit_rows(rng.standard_normal((classes, k))))
    centre_b = unit_rows(w_shared * centre_shared + w_own * unit_rows(rng.standard_normal((classes, k))))
    proj_a = rng.standard_normal((k, a)) / np.sqrt(k)
    proj_b = rng.standard_normal((k, b)) / np.sqrt(k)

    y = np.arange(n) % classes
    y = y[rng.permutation(n)]
    shared_noise = rng.standard_normal((n, k))
    lat_a = class_sep * centre_a[y] + w_shared * shared_noise + w_own * rng.standard_normal((n, k))
    lat_b = class_sep * centre_b[y] + w_shared * shared_noise + w_own * rng.standard_normal((n, k))
    xa = lat_a @ proj_a + noise * 0.1 * rng.standard_normal((n, a))
    xb = lat_b @ proj_b + noise * 0.1 * rng.standard_normal((n, b))
    return np.concatenate([xa, xb], axis=1), one_hot(y, classes)


def split_holdout(
    features: np.ndarray, labels: np.ndarray, test_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n = len(features)
    n_test = _count(test_fraction, n) if test_fraction > 0 else 0
    if not 0 < n_test < n:
        raise ValueError(f"test_fraction {test_fraction} leaves an empty train or test split")
    order = np.random.default_rng(seed).permutation(n)
    te, tr = order[:n_test], order[n_test:]
    return features[tr], labels[tr], features[te], labels[te]


@dataclass
class TestSplit:
    """Fully aligned evaluation rows: both parties present, labels at A."""

    __test__ = False

    features_a: np.ndarray
    features_b: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.features_a) == 0:
            raise ValueError("empty test split")
        if not len(self.features_a) == len(self.features_b) == len(self.labels):
            raise ValueError("test split row counts differ")

    @classmethod
    def from_centralized(cls, features: np.ndarray, labels: np.ndarray, split_col: int) -> "TestSplit":
        return cls(features[:, :split_col], features[:, split_col:], labels)

    @classmethod
    def from_overlap(cls, ds: VerticalDataset) -> "TestSplit":
        xa, y, xb = ds.ol_arrays()
        return cls(xa, xb, y)


def split_overlap_for_test(
    ds: VerticalDataset, test_fraction: float, seed: int
) -> tuple[VerticalDataset, TestSplit]:
    """Hold out a share of the aligned pairs as a test split."""
    n_test = _count(test_fraction, ds.n_overlap)
    if not 0 < n_test < ds.n_overlap:
        raise ValueError("test_fraction leaves no test pairs or no training pairs")
    order = np.random.default_rng(seed).permutation(ds.n_overlap)
    test_pairs = ds.overlap_pairs[order[:n_test]]
    tr_pairs = ds.overlap_pairs[np.sort(order[n_test:])]
    keep_a = np.sort(np.concatenate([tr_pairs[:, 0], ds.nonoverlap_a]))
    keep_b = np.sort(np.concatenate([tr_pairs[:, 1], ds.nonoverlap_b]))
    remap_a = {old: new for new, old in enumerate(keep_a)}
    remap_b = {old: new for new, old in enumerate(keep_b)}
    sub = VerticalDataset(
        ds.features_a[keep_a],
        ds.labels_a[keep_a],
        ds.features_b[keep_b],
        np.array([(remap_a[i], remap_b[j]) for i, j in tr_pairs], dtype=np.int64).reshape(-1, 2),
        np.array([remap_a[i] for i in ds.nonoverlap_a], dtype=np.int64),
        np.array([remap_b[j] for j in ds.nonoverlap_b], dtype=np.int64),
        [ds.ids_a[i] for i in keep_a] if ds.ids_a else None,
        [ds.ids_b[j] for j in keep_b] if ds.ids_b else None,
        ds.feature_names_a,
        ds.feature_names_b,
        ds.class_values,
    )
    test = TestSplit(
        ds.features_a[test_pairs[:, 0]],
        ds.features_b[test_pairs[:, 1]],
        ds.labels_a[test_pairs[:, 0]],
    )
    return sub, test


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _read_table(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append((lineno, [c.strip() for c in row]))
    return header, rows


def _parse_party(path: Path, labelled: bool):
    header, rows = _read_table(path)
    if "id" not in header:
        raise DataError(f"{path}:1: missing 'id' column")
    if labelled and "label" not in header:
        raise DataError(f"{path}:1: missing 'label' column")
    id_col = header.index("id")
    label_col = header.index("label") if labelled else None
    feat_cols = [i for i, h in enumerate(header) if i not in (id_col, label_col)]
    ids, feats, labels, seen = [], [], [], {}
    for lineno, row in rows:
        rid = row[id_col]
        if rid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {rid!r}")
        seen[rid] = lineno
        try:
            feats.append([float(row[i]) for i in feat_cols])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
        ids.append(rid)
        if labelled:
            labels.append(row[label_col])
    names = [header[i] for i in feat_cols]
    return ids, np.array(feats, dtype=np.float64).reshape(len(ids), len(feat_cols)), labels, names


def _label_sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def load_csv(path_a, path_b, path_overlap_map) -> VerticalDataset:
    """Read party A (id, label, features), party B (id, features) and an id_a,id_b map."""
    ids_a, xa, raw_labels, names_a = _parse_party(Path(path_a), labelled=True)
    ids_b, xb, _, names_b = _parse_party(Path(path_b), labelled=False)
    pos_a = {rid: i for i, rid in enumerate(ids_a)}
    pos_b = {rid: i for i, rid in enumerate(ids_b)}

    header, rows = _read_table(Path(path_overlap_map))
    if header[:2] != ["id_a", "id_b"] or len(header) != 2:
        raise DataError(f"{path_overlap_map}:1: header must be 'id_a,id_b'")
    pairs, used_a, used_b = [], set(), set()
    for lineno, (ra, rb) in rows:
        if ra not in pos_a:
            raise DataError(f"{path_overlap_map}:{lineno}: unknown id_a {ra!r}")
        if rb not in pos_b:
            raise DataError(f"{path_overlap_map}:{lineno}: unknown id_b {rb!r}")
        if ra in used_a or rb in used_b:
            raise DataError(f"{path_overlap_map}:{lineno}: duplicate id in overlap map")
        used_a.add(ra)
        used_b.add(rb)
        pairs.append((pos_a[ra], pos_b[rb]))

    classes = sorted(set(raw_labels), key=_label_sort_key)
    cls_index = {c: i for i, c in enumerate(classes)}
    labels = one_hot(np.array([cls_index[v] for v in raw_labels], dtype=np.int64), len(classes))
    ol_a = {i for i, _ in pairs}
    ol_b = {j for _, j in pairs}
    return VerticalDataset(
        xa,
        labels,
        xb,
        np.array(pairs, dtype=np.int64).reshape(-1, 2),
        np.array([i for i in range(len(ids_a)) if i not in ol_a], dtype=np.int64),
        np.array([j for j in range(len(ids_b)) if j not in ol_b], dtype=np.int64),
        ids_a,
        ids_b,
        names_a,
        names_b,
        classes,
    )


def write_csv(ds: VerticalDataset, path_a, path_b, path_overlap_map) -> None:
    ids_a = ds.ids_a or [f"a{i}" for i in range(len(ds.features_a))]
    ids_b = ds.ids_b or [f"b{i}" for i in range(len(ds.features_b))]
    names_a = ds.feature_names_a or [f"fa{i}" for i in range(ds.dim_a)]
    names_b = ds.feature_names_b or [f"fb{i}" for i in range(ds.dim_b)]
    classes = ds.class_values or [str(c) for c in range(ds.num_classes)]
    label_idx = ds.labels_a.argmax(axis=1)
    with open(path_a, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", *names_a])
        for rid, lab, row in zip(ids_a, label_idx, ds.features_a):
            w.writerow([rid, classes[lab], *(repr(float(v)) for v in row)])
    with open(path_b, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *names_b])
        for rid, row in zip(ids_b, ds.features_b):
            w.writerow([rid, *(repr(float(v)) for v in row)])
    with open(path_overlap_map, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id_a", "id_b"])
        for i, j in ds.overlap_pairs:
            w.writerow([ids_a[i], ids_b[j]])


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class TriBatch:
    """One step's draw from the three pools.  Absent parts are ``None``."""

    ol_xa: Tensor | None = None
    ol_y: Tensor | None = None
    ol_xb: Tensor | None = None
    a_nl_x: Tensor | None = None
    a_nl_y: Tensor | None = None
    b_nl_x: Tensor | None = None
    ol_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    a_nl_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    b_nl_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_ol(self) -> int:
        return len(self.ol_index)

    @property
    def n_a(self) -> int:
        return len(self.a_nl_index)

    @property
    def n_b(self) -> int:
        return len(self.b_nl_index)


def _pool_schedule(size: int, batch: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    if size == 0 or batch == 0:
        return [np.zeros(0, dtype=np.int64)] * steps
    chunks: list[np.ndarray] = []
    while len(chunks) < steps:
        perm = rng.permutation(size)
        chunks.extend(perm[i : i + batch] for i in range(0, size, batch))
    return chunks[:steps]


def steps_per_epoch(ds: VerticalDataset, batch_ol: int, batch_a: int, batch_b: int) -> int:
    sizes = [(ds.n_overlap, batch_ol), (len(ds.nonoverlap_a), batch_a), (len(ds.nonoverlap_b), batch_b)]
    return max([math.ceil(s / b) for s, b in sizes if s > 0 and b > 0] or [0])


def tri_batches(
    ds: VerticalDataset, batch_ol: int, batch_a: int, batch_b: int, seed: int
) -> Iterator[TriBatch]:
    """One epoch of aligned mini-batches.

    The epoch lasts as long as the pool needing the most batches; shorter
    pools are reshuffled and cycled.  Pool shuffles use independent streams.
    """
    if min(batch_ol, batch_a, batch_b) < 1:
        raise ValueError("batch sizes must be >= 1")
    steps = steps_per_epoch(ds, batch_ol, batch_a, batch_b)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    sched_ol = _pool_schedule(ds.n_overlap, batch_ol, steps, rngs[0])
    sched_a = _pool_schedule(len(ds.nonoverlap_a), batch_a, steps, rngs[1])
    sched_b = _pool_schedule(len(ds.nonoverlap_b), batch_b, steps, rngs[2])
    for s in range(steps):
        tb = TriBatch(ol_index=sched_ol[s], a_nl_index=sched_a[s], b_nl_index=sched_b[s])
        if tb.n_ol:
            pairs = ds.overlap_pairs[tb.ol_index]
            tb.ol_xa = Tensor(ds.features_a[pairs[:, 0]])
            tb.ol_y = Tensor(ds.labels_a[pairs[:, 0]])
            tb.ol_xb = Tensor(ds.features_b[pairs[:, 1]])
        if tb.n_a:
            rows = ds.nonoverlap_a[tb.a_nl_index]
            tb.a_nl_x = Tensor(ds.features_a[rows])
            tb.a_nl_y = Tensor(ds.labels_a[rows])
        if tb.n_b:
            tb.b_nl_x = Tensor(ds.features_b[ds.nonoverlap_b[tb.b_nl_index]])
        yield tb
