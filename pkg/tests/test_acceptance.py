"""One check per acceptance criterion, each logging a PASS/FAIL line."""

import hashlib
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from fedmvt import tensor as T
from fedmvt.boundary import Direction, MessageKind
from fedmvt.config import ExperimentConfig
from fedmvt.data import TestSplit, make_synthetic, split_holdout, tri_batches, vertical_partition
from fedmvt.estimation import attention_weights, estimate_missing, estimate_shared, estimate_unique
from fedmvt.experiment import build_cell_data, run_experiment
from fedmvt.nn import forward_classifier
from fedmvt.objective import COMPONENTS, LossWeights, loss_classifier, loss_orthogonality, loss_shared_alignment
from fedmvt.pseudo import PseudoCandidates, build_training_sets, select
from fedmvt.tensor import Tensor
from fedmvt.training import Federation, TrainConfig, make_parties, train, train_vanilla_local, train_vanilla_vfl

from gradcheck import numeric_grad
from oracles import brute_force_select, two_key_attention
from test_pseudo import random_candidates
from toy import one_batch, toy_config, toy_dataset


def norm_rel_err(g: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    """‖g − n‖ / max(‖g‖, ‖n‖, floor) over a whole gradient vector; the floor covers an all-zero gradient."""
    return float(np.linalg.norm(g - n) / max(np.linalg.norm(g), np.linalg.norm(n), floor))


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def _toy_components(models, batch, cfg):
    """Every loss component on one step, on a single tape, assembled from the library pieces."""
    A, B = models.party_a, models.party_b
    ra_ol, ra_nl = A.represent(batch.ol_xa), A.represent(batch.a_nl_x)
    rb_ol, rb_nl = B.represent(batch.ol_xb), B.represent(batch.b_nl_x)
    pool_a = T.concat_samples([ra_ol.shared, ra_nl.shared])
    pool_b = T.concat_samples([rb_ol.shared, rb_nl.shared])
    rt_a_ol = estimate_missing("A", rb_ol, rb_ol, ra_ol, pool_a)
    rt_b_ol = estimate_missing("B", ra_ol, ra_ol, rb_ol, pool_b)
    rt_a_nl = estimate_missing("A", rb_nl, rb_ol, ra_ol, pool_a)
    rt_b_nl = estimate_missing("B", ra_nl, ra_ol, rb_ol, pool_b)
    with T.no_grad():
        cand = PseudoCandidates(
            forward_classifier(A.f_A, T.detach(rt_a_nl.full())),
            forward_classifier(B.f_B, T.detach(rb_nl.full())),
            forward_classifier(A.f_AB, T.detach(T.concat_features(rb_nl.full(), rt_a_nl.full()))),
        )
    chi = build_training_sets(
        (rb_ol.full(), ra_ol.full(), batch.ol_y),
        (rt_b_nl.full(), ra_nl.full(), batch.a_nl_y),
        (rb_nl.full(), rt_a_nl.full()),
        select(cand, cfg.threshold, cfg.select_rule),
    )
    cat = lambda p, q: (T.concat_samples([p.unique, q.unique]), T.concat_samples([p.shared, q.shared]))
    return {
        "L_fed": loss_classifier(A.f_AB, chi.chi_full.reps, chi.chi_full.labels),
        "L_A": loss_classifier(A.f_A, chi.chi_A.reps, chi.chi_A.labels),
        "L_B": loss_classifier(B.f_B, chi.chi_B.reps, chi.chi_B.labels),
        "L_A_dist": T.mean_sq_row_distance(rt_a_ol.full(), ra_ol.full()),
        "L_B_dist": T.mean_sq_row_distance(rt_b_ol.full(), rb_ol.full()),
        "L_AB_dist": loss_shared_alignment(ra_ol.shared, rb_ol.shared),
        "L_A_orth": loss_orthogonality(*cat(ra_ol, ra_nl)),
        "L_B_orth": loss_orthogonality(*cat(rb_ol, rb_nl)),
    }


def _component_errors(seed):
    """Norm-relative error of each component's gradient over the full parameter vector."""
    ds = toy_dataset(seed)
    cfg = toy_config(seed)
    models = make_parties(ds, cfg)
    batch = one_batch(ds, cfg, seed)
    params = models.params()
    analytic = {}
    for name in COMPONENTS:
        tape = T.Tape()
        with tape:
            loss = _toy_components(models, batch, cfg)[name]
        grads = T.backward(tape, loss, wrt=params)
        analytic[name] = np.concatenate([grads[p.node].values.ravel() for p in params])

    def values():
        with T.no_grad():
            comps = _toy_components(models, batch, cfg)
        return np.array([comps[c].item() for c in COMPONENTS])

    # one central-difference sweep yields every component at once
    h = 1e-5
    numeric = []
    for p in params:
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = values()
            flat[i] = old - h
            fm = values()
            flat[i] = old
            numeric.append((fp - fm) / (2 * h))
    numeric = np.array(numeric)
    return {c: norm_rel_err(analytic[c], numeric[:, k]) for k, c in enumerate(COMPONENTS)}


def _full_objective_error(seed, **kw):
    ds = toy_dataset(seed)
    cfg = toy_config(seed, **kw)
    models = make_parties(ds, cfg)
    batch = one_batch(ds, cfg, seed)
    fed = Federation(models, cfg, "fedmvt", ds)
    ga, gb, report = fed.step_gradients(batch)
    assert report.extras["n_selected"] > 0 and report.skipped == ()

    def value():
        return fed.step_gradients(batch)[2].total

    g, n = [], []
    for party, grads in ((models.party_a, ga), (models.party_b, gb)):
        for p in party.params():
            g.append(grads[p.node].values.ravel())
            n.append(numeric_grad(value, p.values).ravel())
    return norm_rel_err(np.concatenate(g), np.concatenate(n))


def test_criterion_1_gradients(acceptance):
    start = time.perf_counter()
    seeds = range(20)
    per_component = {c: 0.0 for c in COMPONENTS}
    full = []
    for s in seeds:
        for c, e in _component_errors(s).items():
            per_component[c] = max(per_component[c], e)
        full.append(_full_objective_error(s))
    # the two estimator options, on fewer seeds
    variants = [_full_objective_error(s, exclude_self=True, pool="full") for s in range(5)]
    variants += [_full_objective_error(s, orthogonality="outer", select_rule="any") for s in range(5)]
    elapsed = time.perf_counter() - start
    worst = max(max(per_component.values()), max(full), max(variants))
    ok = worst < 1e-4 and elapsed < 60
    acceptance.record(
        "1", ok,
        f"worst rel err {worst:.2e} over {len(seeds)} seeds "
        f"(components max {max(per_component.values()):.1e}, full objective {max(full):.1e}, "
        f"variants {max(variants):.1e}); {elapsed:.1f}s",
    )
    assert worst < 1e-4, per_component
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. attention oracle
# ---------------------------------------------------------------------------


def test_criterion_2_attention(acceptance):
    rng = np.random.default_rng(0)
    oracle_err = 0.0
    for _ in range(200):
        k1, k2, v1, v2 = rng.normal(scale=2, size=4)
        q = k1
        _, _, shared_ref = two_key_attention(q, k1, k2, k1, k2)
        _, _, unique_ref = two_key_attention(q, k1, k2, v1, v2)
        got_s = estimate_shared(Tensor([[q]]), Tensor([[k1], [k2]])).item()
        got_u = estimate_unique(Tensor([[q]]), Tensor([[k1], [k2]]), Tensor([[v1], [v2]])).item()
        oracle_err = max(oracle_err, abs(got_s - shared_ref), abs(got_u - unique_ref))

    stoch_err, hull_violation, uniform_err = 0.0, 0.0, 0.0
    for _ in range(200):
        m, n, d, dv = rng.integers(1, 8, size=4)
        q, k, v = rng.normal(scale=3, size=(m, d)), rng.normal(scale=3, size=(n, d)), rng.normal(size=(n, dv))
        w = attention_weights(Tensor(q), Tensor(k)).values
        stoch_err = max(stoch_err, np.abs(w.sum(axis=1) - 1).max())
        for out, vals in ((estimate_unique(Tensor(q), Tensor(k), Tensor(v)).values, v),
                          (estimate_shared(Tensor(q), Tensor(k)).values, k)):
            below = (vals.min(axis=0) - out).max()
            above = (out - vals.max(axis=0)).max()
            hull_violation = max(hull_violation, below, above)
        w_small = attention_weights(Tensor(1e-6 * q), Tensor(1e-6 * k)).values
        uniform_err = max(uniform_err, np.abs(w_small - 1 / n).max())

    ok = oracle_err < 1e-9 and stoch_err < 1e-9 and hull_violation <= 1e-9 and uniform_err < 1e-4
    acceptance.record(
        "2", ok,
        f"2-key oracle err {oracle_err:.1e}, row-sum err {stoch_err:.1e}, "
        f"hull excess {max(hull_violation, 0):.1e}, uniform-limit err {uniform_err:.1e}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. pseudo-label rule
# ---------------------------------------------------------------------------


def test_criterion_3_select(acceptance):
    rng = np.random.default_rng(123)
    mismatches, monotone_breaks, total_selected = 0, 0, 0
    for _ in range(1000):
        c = random_candidates(rng, int(rng.integers(1, 65)), int(rng.integers(2, 11)))
        t = float(rng.uniform(0.0, 1.0))
        idx, y = select(c, t)
        ref_idx, ref_lab = brute_force_select(c.stacked(), t)
        if idx.tolist() != ref_idx or y.argmax(axis=1).tolist() != ref_lab:
            mismatches += 1
        total_selected += len(idx)
        ts = np.sort(rng.uniform(0, 1, size=5))
        sets = [set(select(c, ti)[0].tolist()) for ti in ts]
        monotone_breaks += sum(not (b <= a) for a, b in zip(sets, sets[1:]))
    ok = mismatches == 0 and monotone_breaks == 0 and total_selected > 0
    acceptance.record(
        "3", ok,
        f"1000 batches: {mismatches} mismatches vs brute force ({total_selected} rows selected), "
        f"{monotone_breaks} monotonicity breaks",
    )
    assert ok


# ---------------------------------------------------------------------------
# 4. split backward equals monolithic backward
# ---------------------------------------------------------------------------


def _split_vs_mono(ds, cfg, batch):
    split = make_parties(ds, cfg)
    mono = make_parties(ds, cfg)
    ga, gb, _ = Federation(split, cfg, "fedmvt", ds).step_gradients(batch)
    mono_cfg = TrainConfig(**{**vars(cfg), "split": False})
    gm, _, _ = Federation(mono, mono_cfg, "fedmvt", ds).step_gradients(batch)
    worst = 0.0
    for ps, pm in zip(split.party_a.params(), mono.party_a.params()):
        worst = max(worst, np.abs(ga[ps.node].values - gm[pm.node].values).max())
    for ps, pm in zip(split.party_b.params(), mono.party_b.params()):
        worst = max(worst, np.abs(gb[ps.node].values - gm[pm.node].values).max())
    return worst


def test_criterion_4_split_backward(acceptance):
    worst = 0.0
    for seed in range(10):
        ds = toy_dataset(seed)
        cfg = toy_config(seed)
        worst = max(worst, _split_vs_mono(ds, cfg, one_batch(ds, cfg, seed)))
    # a realistic batch with the default architecture
    X, Y = make_synthetic(600, (16, 16), 4, 1.5, 0.7, seed=0)
    ds = vertical_partition(X, Y, 16, 0.1, 0.5, 0.5, seed=0)
    cfg = TrainConfig(threshold=0.3)
    worst = max(worst, _split_vs_mono(ds, cfg, one_batch(ds, cfg)))
    # whole trajectories: two epochs of updates in each mode
    r_split = train(ds, TrainConfig(epochs=2))
    r_mono = train(ds, TrainConfig(epochs=2, split=False))
    traj = max(np.abs(a - b).max() for a, b in zip(r_split.models.snapshot(), r_mono.models.snapshot()))
    ok = worst <= 1e-10 and traj <= 1e-10 and len(r_mono.ledger) == 0 and len(r_split.ledger) > 0
    acceptance.record(
        "4", ok,
        f"max |split - monolithic| gradient {worst:.1e}; after 2 epochs parameters differ by {traj:.1e}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 5. privacy-contract audit
# ---------------------------------------------------------------------------


def _acceptance_cell(overlap=40, seed=0, **overrides):
    cfg = ExperimentConfig().with_values(**overrides) if overrides else ExperimentConfig()
    ds, test = build_cell_data(cfg, overlap, seed)
    return cfg, ds, test


def _inject(monkeypatch, at_step, payload):
    original = Federation._forward_federated

    def faulty(self, batch):
        if self.step_count == at_step:
            self.channel.send(
                payload(self, batch), MessageKind.REPR_FORWARD, Direction.B_TO_A, self.tape_b, self.tape_a,
                differentiable=False,
            )
        return original(self, batch)

    monkeypatch.setattr(Federation, "_forward_federated", faulty)


def test_criterion_5_audit(acceptance, monkeypatch):
    cfg, ds, test = _acceptance_cell(train__epochs=3)
    tc = cfg.train_config(0)
    clean = train(ds, tc).audit()
    vfl = train_vanilla_vfl(ds, tc).audit()
    local = train_vanilla_local(ds, tc)
    kinds_ok = set(clean.counts) == {"ReprForward", "GradBackward", "LossScalarReport"}

    faults = {
        "raw B features": (7, lambda self, b: b.ol_xb),
        "raw A features": (11, lambda self, b: b.a_nl_x),
        "labels": (2, lambda self, b: b.ol_y),
        "f_AB weights": (5, lambda self, b: self.models.party_a.f_AB.head.weight),
        "h_c^B first-layer weights": (9, lambda self, b: self.models.party_b.h_c.layers[0].weight),
    }
    caught = {}
    for name, (step, payload) in faults.items():
        with monkeypatch.context() as mp:
            _inject(mp, step, payload)
            rep = train(ds, TrainConfig(**{**vars(tc), "epochs": 1})).audit()
        caught[name] = (not rep.passed) and rep.violations[0].step == step and f"step {step}" in rep.summary()

    ok = clean.passed and vfl.passed and kinds_ok and local.audit().passed and len(local.ledger) == 0 and all(caught.values())
    acceptance.record(
        "5", ok,
        f"clean FedMVT run {clean.summary()} kinds={sorted(clean.counts)}; vanilla-VFL {vfl.summary()}; "
        f"faults caught at the right step: {sum(caught.values())}/{len(caught)}",
    )
    assert ok, caught


# ---------------------------------------------------------------------------
# 6. degeneration to vanilla VFL
# ---------------------------------------------------------------------------


def test_criterion_6_degeneration(acceptance):
    worst, n_steps = 0.0, 0
    for seed in range(3):
        X, Y = make_synthetic(800, (16, 16), 4, 1.5, 0.7, seed=seed)
        ds = vertical_partition(X, Y, 16, 0.25, 0.0, 0.0, seed=seed)
        assert len(ds.nonoverlap_a) == len(ds.nonoverlap_b) == 0
        cfg = TrainConfig(epochs=5, weights=LossWeights.zeros(), threshold=1.0, vanilla_heads="all", seed=seed)
        f, v = train(ds, cfg), train_vanilla_vfl(ds, cfg)
        assert len(f.step_reports) == len(v.step_reports)
        n_steps += len(f.step_reports)
        worst = max(worst, max(abs(a.total - b.total) for a, b in zip(f.step_reports, v.step_reports)))
    ok = worst <= 1e-10
    acceptance.record("6", ok, f"{n_steps} steps over 3 seeds, max per-step |total difference| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 7. directional reproduction
# ---------------------------------------------------------------------------


def test_criterion_7_directional(acceptance, tmp_path):
    cfg = ExperimentConfig()
    assert cfg.overlap_sizes == (40, 100, 400) and cfg.seeds == (0, 1, 2, 3, 4)
    assert (cfg["data.n"], cfg["data.classes"], cfg["data.cross_view_corr"]) == (4000, 4, 0.7)
    start = time.perf_counter()
    out = run_experiment(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    mean = {(r["model"], r["overlap_size"]): r["mean_acc"] for r in out.aggregate}
    gaps = [mean["fedmvt_vfl", ov] - mean["vanilla_vfl", ov] for ov in cfg.overlap_sizes]
    local_margin = [mean["fedmvt_local", ov] - mean["vanilla_local", ov] for ov in cfg.overlap_sizes]
    a = gaps[0] >= 3
    b = all(later <= earlier for earlier, later in zip(gaps, gaps[1:]))
    c = all(m >= -1 for m in local_margin)
    ok = a and b and c and elapsed < 15 * 60
    table = "; ".join(
        f"ov {ov}: VFL {mean['fedmvt_vfl', ov]:.1f} vs {mean['vanilla_vfl', ov]:.1f}, "
        f"local {mean['fedmvt_local', ov]:.1f} vs {mean['vanilla_local', ov]:.1f}"
        for ov in cfg.overlap_sizes
    )
    acceptance.record(
        "7", ok,
        f"(a) gap@40 {gaps[0]:+.1f} [{'ok' if a else 'no'}] (b) gaps {[round(g, 1) for g in gaps]} "
        f"[{'ok' if b else 'no'}] (c) local margins {[round(m, 1) for m in local_margin]} "
        f"[{'ok' if c else 'no'}]; {elapsed:.0f}s | {table}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------


def _run_digest(args):
    trainer_name, seed = args
    cfg, ds, test = _acceptance_cell(overlap=40, seed=seed, train__epochs=3)
    trainer = {"fedmvt": train, "vanilla_vfl": train_vanilla_vfl, "vanilla_local": train_vanilla_local}[trainer_name]
    res = trainer(ds, cfg.train_config(seed), test)
    h = hashlib.sha256()
    for p in res.models.snapshot():
        h.update(p.tobytes())
    h.update(repr(res.history).encode())
    return h.hexdigest()


def test_criterion_8_determinism(acceptance):
    jobs = [(name, seed) for name in ("fedmvt", "vanilla_vfl", "vanilla_local") for seed in (0, 3)]
    in_process = [_run_digest(j) for j in jobs]
    again = [_run_digest(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=2) as pool:
        other_process = list(pool.map(_run_digest, jobs))
    ok = in_process == again == other_process and len(set(in_process)) == len(jobs)
    acceptance.record(
        "8", ok, f"{len(jobs)} (config, seed) pairs: parameter+metric digests identical across 3 runs (2 in-process, 1 subprocess)"
    )
    assert ok
