"""Overlap-size × seed sweeps over the four models, with CSV/JSON output.

Each (overlap size, seed) cell is independent: it builds its own split,
trains Vanilla-local, Vanilla-VFL and FedMVT (which yields both
FedMVT-local from ``f_A`` and FedMVT-VFL from ``f_AB``), and writes
``cell_ov<size>_seed<seed>.{csv,json}`` as soon as it finishes.  The
aggregate table is written once, after every cell has completed.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedmvt.config import ExperimentConfig
from fedmvt.data import (
    TestSplit,
    VerticalDataset,
    load_csv,
    make_synthetic,
    restrict_overlap,
    split_holdout,
    split_overlap_for_test,
    vertical_partition,
)
from fedmvt.objective import COMPONENTS
from fedmvt.training import TrainResult, train, train_vanilla_local, train_vanilla_vfl

log = logging.getLogger(__name__)

MODELS = ("vanilla_local", "vanilla_vfl", "fedmvt_local", "fedmvt_vfl")
# (trainer run, head) behind each reported model
MODEL_SOURCES = {
    "vanilla_local": ("vanilla_local", "fA"),
    "vanilla_vfl": ("vanilla_vfl", "fAB"),
    "fedmvt_local": ("fedmvt", "fA"),
    "fedmvt_vfl": ("fedmvt", "fAB"),
}
AGGREGATE_COLUMNS = ("model", "overlap_size", "mean_acc", "std_acc", "n_seeds")
EPOCH_COLUMNS = (
    ("run", "epoch", "steps", "loss_total")
    + tuple(f"loss_{c}" for c in COMPONENTS)
    + ("n_selected", "n_unlabeled", "acc_fA", "acc_fB", "acc_fAB")
)


class CellFailure(RuntimeError):
    pass


def cell_key(overlap: int, seed: int) -> str:
    return f"ov{overlap}_seed{seed}"


def build_cell_data(cfg: ExperimentConfig, overlap: int, seed: int) -> tuple[VerticalDataset, TestSplit]:
    """The two-party training set (with exactly ``overlap`` pairs) and its test split."""
    v = cfg.values
    if v["data.source"] == "synthetic":
        X, Y = make_synthetic(
            v["data.n"],
            (v["data.dim_a"], v["data.dim_b"]),
            v["data.classes"],
            v["data.class_sep"],
            v["data.cross_view_corr"],
            seed=seed,
            latent_dim=v["data.latent_dim"],
            noise=v["data.noise"],
        )
        Xtr, Ytr, Xte, Yte = split_holdout(X, Y, v["data.test_fraction"], seed)
        n_train = len(Xtr)
        if overlap > n_train:
            raise ValueError(f"overlap size {overlap} exceeds the {n_train} training samples")
        ds = vertical_partition(
            Xtr, Ytr, v["data.dim_a"], overlap / n_train, v["data.nl_fraction_a"], v["data.nl_fraction_b"], seed
        )
        return ds, TestSplit.from_centralized(Xte, Yte, v["data.dim_a"])
    full = load_csv(v["data.csv_a"], v["data.csv_b"], v["data.csv_overlap"])
    ds, test = split_overlap_for_test(full, v["data.test_fraction"], seed)
    if overlap > ds.n_overlap:
        raise ValueError(f"overlap size {overlap} exceeds the {ds.n_overlap} aligned training pairs")
    return restrict_overlap(ds, overlap, seed), test


def _epoch_rows(run: str, result: TrainResult) -> list[dict]:
    rows = []
    for h in result.history:
        row = {"run": run, "epoch": h["epoch"], "steps": h["steps"], "loss_total": h["loss"]["total"]}
        row.update({f"loss_{c}": h["loss"][c] for c in COMPONENTS})
        row.update(n_selected=h["n_selected"], n_unlabeled=h["n_unlabeled"])
        row.update({f"acc_{k}": h["accuracy"].get(k, "") for k in ("fA", "fB", "fAB")})
        rows.append(row)
    return rows


def run_cell(cfg: ExperimentConfig, overlap: int, seed: int, out_dir: Path) -> dict:
    """Train and evaluate every model for one cell; writes and returns its record."""
    start = time.perf_counter()
    ds, test = build_cell_data(cfg, overlap, seed)
    tcfg = cfg.train_config(seed)
    results = {
        "vanilla_local": train_vanilla_local(ds, tcfg, test),
        "vanilla_vfl": train_vanilla_vfl(ds, tcfg, test),
        "fedmvt": train(ds, tcfg, test),
    }
    final = {
        model: results[run].final_accuracy().get(head) for model, (run, head) in MODEL_SOURCES.items()
    }
    audits = {}
    for run in ("vanilla_vfl", "fedmvt"):
        rep = results[run].audit()
        audits[run] = {
            "passed": rep.passed,
            "summary": rep.summary(),
            "counts": rep.counts,
            "violations": [vars(x) for x in rep.violations[:20]],
        }
    record = {
        "cell": {"overlap_size": overlap, "seed": seed},
        "config": cfg.echo(),
        "dataset": {"n_overlap": ds.n_overlap, "n_a_only": len(ds.nonoverlap_a), "n_b_only": len(ds.nonoverlap_b), "n_test": len(test.labels)},
        "final_accuracy": final,
        "audit": audits,
        "wall_clock": {run: r.wall_clock for run, r in results.items()},
        "wall_clock_total": time.perf_counter() - start,
    }
    key = cell_key(overlap, seed)
    with open(out_dir / f"cell_{key}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPOCH_COLUMNS)
        w.writeheader()
        for run, r in results.items():
            w.writerows(_epoch_rows(run, r))
    (out_dir / f"cell_{key}.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    log.info("cell %s done in %.1fs: %s", key, record["wall_clock_total"], final)
    return record


def aggregate(records: list[dict], overlap_sizes, models=MODELS) -> list[dict]:
    """Mean and population std of final accuracy over seeds, per model per overlap size."""
    rows = []
    for model in models:
        for ov in overlap_sizes:
            accs = [r["final_accuracy"][model] for r in records if r["cell"]["overlap_size"] == ov]
            rows.append(
                {
                    "model": model,
                    "overlap_size": ov,
                    "mean_acc": float(np.mean(accs)) if accs else float("nan"),
                    "std_acc": float(np.std(accs)) if accs else float("nan"),
                    "n_seeds": len(accs),
                }
            )
    return rows


def write_aggregate(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean_acc": repr(r["mean_acc"]), "std_acc": repr(r["std_acc"])})


def _run_cell_job(args):
    cfg, overlap, seed, out_dir = args
    return run_cell(cfg, overlap, seed, Path(out_dir))


@dataclass
class ExperimentOutput:
    records: list[dict]
    aggregate: list[dict]
    out_dir: Path


def run_experiment(cfg: ExperimentConfig, out_dir) -> ExperimentOutput:
    """Every (overlap size, seed) cell, then ``aggregate.csv``.

    Cells that finish are kept on disk even if another fails; in that case
    no aggregate is written and :class:`CellFailure` is raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    jobs = [(cfg, ov, seed, str(out_dir)) for ov in cfg.overlap_sizes for seed in cfg.seeds]
    records, failures = [], []
    workers = min(cfg["run.workers"], len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell_job, j) for j in jobs]
            for job, fut in zip(jobs, futures):
                try:
                    records.append(fut.result())
                except Exception as exc:  # keep the others running
                    failures.append((cell_key(job[1], job[2]), exc))
    else:
        for job in jobs:
            try:
                records.append(_run_cell_job(job))
            except Exception as exc:
                failures.append((cell_key(job[1], job[2]), exc))
    if failures:
        detail = "; ".join(f"{k}: {type(e).__name__}: {e}" for k, e in failures)
        raise CellFailure(f"{len(failures)} of {len(jobs)} cells failed ({detail})")
    rows = aggregate(records, cfg.overlap_sizes)
    write_aggregate(rows, out_dir / "aggregate.csv")
    return ExperimentOutput(records, rows, out_dir)
