"""Acceptance checks.  Each test records one PASS/FAIL line, printed in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v``.  Set ``FISHREC_F4K`` to a
dataset directory (images/, masks/, labels.csv) to enable the public-data check.
"""
import os
import statistics
import time

import numpy as np
import pytest
from helpers import fish_support, planted_instance, random_layout, similarity

from fishrec.association import PartSet, relax_label, sinkhorn_normalize
from fishrec.classifier import (biased_penalties, empirical_benefit, exp_benefit,
                                feasible_interval, kkt_violation, optimal_threshold,
                                threshold_closed_form, train_biased_svm)
from fishrec.config import PipelineConfig, hard_benchmark_config
from fishrec.descriptor import dense_grad_descriptors, fit_pca
from fishrec.evaluation import PredictionRecord, compute_metrics, f1_score
from fishrec.imaging import Sample, load_dataset
from fishrec.partmodel import (LearnConfig, RegionCache, _scaled, _shift_px, local_costs,
                               localize_part, train_part_model)
from fishrec.pipeline import k_sweep, prepare, run_benchmark, sweep_table
from fishrec.synthgen import generate

RESULTS: list[tuple[int, str, str]] = []


def record(n: int, ok, detail: str) -> None:
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    RESULTS.append((n, status, detail))
    print(f"criterion {n}: {status} - {detail}")


@pytest.fixture(scope="module")
def benchmark():
    cfg = hard_benchmark_config()
    t0 = time.time()
    samples = [Sample(*row) for row in generate(cfg.gen_config())]
    res = run_benchmark(samples, cfg)
    res["wall"] = time.time() - t0
    return res


def test_sinkhorn_doubly_stochastic():
    rng = np.random.default_rng(0)
    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(3, 11))
        m = sinkhorn_normalize(rng.uniform(0.01, 1.0, (k + 1, k + 1)))
        worst = max(worst, np.abs(m.sum(0) - 1).max(), np.abs(m.sum(1) - 1).max())
    dt = time.time() - t0
    ok = worst <= 1e-6 and dt < 1.0
    record(1, ok, f"max marginal error {worst:.2e}, {dt:.3f} s")
    assert ok


def test_association_recovery():
    rng = np.random.default_rng(1)
    sup = fish_support()
    hits = total = 0
    t0 = time.time()
    for _ in range(100):
        ref = random_layout(rng, sup)
        ang = np.deg2rad(rng.uniform(-30, 30))
        scale = rng.uniform(0.8, 1.2)
        flip = bool(rng.random() < 0.5)
        shift = rng.uniform(50, 150, 2)
        cand = similarity(ref + rng.normal(0, 1.0, ref.shape), ang, scale, flip, shift)
        csup = similarity(sup, ang, scale, flip, shift)
        perm = rng.permutation(6)
        got = relax_label(PartSet(cand[perm], csup), PartSet(ref, sup))
        hits += sum(got[i] == perm[i] for i in range(6))
        total += 6
    dt = time.time() - t0
    rate = hits / total
    ok = rate >= 0.95 and dt < 30
    record(2, ok, f"recovered {rate:.3f} of parts, {dt:.1f} s")
    assert ok


def test_part_learning_monotone(benchmark):
    runs = [benchmark["J"]]
    iters = [benchmark["iterations"]]
    converged = [benchmark["converged"]]
    for seed in (1, 2, 3):
        cfg = PipelineConfig(seed=seed, synth_images_per_species=8)
        items = prepare([Sample(*r) for r in generate(cfg.gen_config())], cfg)
        model = train_part_model([p.image for p in items], [p.mask for p in items], cfg.learn_config())
        runs.append([h.total for h in model.history])
        iters.append(model.iterations)
        converged.append(model.converged)
    mono = all(all(b <= a + 1e-9 * abs(a) for a, b in zip(j, j[1:])) for j in runs)
    ok = mono and max(iters) <= 15
    record(3, ok, f"J non-increasing in {len(runs)} runs: {mono}; iterations {iters} "
                  f"(median {statistics.median(iters)}), converged {converged}")
    assert ok


def test_localization_grid_oracle():
    rng = np.random.default_rng(4)
    pca = fit_pca(np.stack([dense_grad_descriptors(rng.random((16, 16))) for _ in range(30)]))
    cfg = LearnConfig(k=1)
    worst = -np.inf
    for _ in range(50):
        img, target = planted_instance(rng)
        cache = RegionCache(img, pca)
        p = cache([target])[0]
        off = rng.integers(-3, 4, 2)
        for size_rect in (target, _scaled(target, cfg.scale_base)):
            init = _shift_px(size_rect, *off, img.shape)
            got = localize_part(0, [init], p, cache, cfg)
            cost = local_costs([got], 0, [got], p, cache, cfg)[0]
            for center in (init, got):
                grid = [_shift_px(center, dx, dy, img.shape) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
                best = local_costs(grid, 0, [center], p, cache, cfg).min()
                worst = max(worst, cost - best)
    ok = worst <= 1e-6
    record(4, ok, f"max (accepted - grid optimum) = {worst:.2e} over 50 instances x 2 sizes")
    assert ok


def test_benefit_lower_bound():
    rng = np.random.default_rng(5)
    worst = -np.inf
    for _ in range(50):
        a = rng.normal(rng.uniform(-0.5, 2), rng.uniform(0.2, 2), int(rng.integers(10, 201)))
        ts = np.arange(0, np.abs(a).max() + 0.5, 1e-3)
        b = np.array([empirical_benefit(t, a) for t in ts])
        worst = max(worst, float(np.max(exp_benefit(ts, a) - b)))
    ok = worst <= 0
    record(5, ok, f"max B_exp - B on 1e-3 grid = {worst:.3e}")
    assert ok


def test_threshold_oracle():
    rng = np.random.default_rng(6)
    worst_grid = worst_cf = 0.0
    interior = 0
    for _ in range(50):
        a = rng.normal(rng.uniform(0, 1.5), rng.uniform(0.2, 1.5), int(rng.integers(10, 201)))
        t = optimal_threshold(a)
        box = feasible_interval(a)
        if box is None:
            worst_grid = max(worst_grid, abs(t))
            continue
        lo, hi = box
        ts = np.arange(lo, hi + 5e-5, 1e-4)
        ts = ts[ts <= hi]
        grid = float(ts[np.argmax(exp_benefit(ts, a))])
        worst_grid = max(worst_grid, abs(t - grid))
        tu = 0.5 * np.log(len(a) / np.sum(np.exp(-2 * a)))
        if lo < tu < hi:
            interior += 1
            worst_cf = max(worst_cf, abs(t - tu))
        worst_cf = max(worst_cf, abs(t - threshold_closed_form(a)))
    ok = worst_grid <= 1e-3 and worst_cf <= 1e-6
    record(6, ok, f"|t* - grid| <= {worst_grid:.1e}, |t* - closed form| <= {worst_cf:.1e} "
                  f"({interior} interior cases)")
    assert ok


def test_svm_contract():
    rng = np.random.default_rng(7)
    y = np.array([1] * 10 + [-1] * 90)
    formula = biased_penalties(y, 1.0) == (0.9, 0.1)
    x = np.concatenate([rng.normal(0, 1, (10, 4)), rng.normal(0.7, 1, (90, 4))])
    node, alpha, cvec = train_biased_svm(x, y, 1.0, return_alpha=True)
    viol = kkt_violation(alpha, node.train_margins, cvec)
    xs = np.concatenate([rng.normal(-2, 0.5, (40, 2)), rng.normal(2, 0.5, (40, 2))])
    ys = np.array([-1] * 40 + [1] * 40)
    sep = train_biased_svm(xs, ys, 10.0)
    err = int(np.sum(np.sign(sep.decision(xs)) != ys))
    ok = formula and viol <= 1e-3 and err == 0
    record(7, ok, f"C+/C- formula exact: {formula}; KKT violation {viol:.1e}; "
                  f"separable training errors {err}")
    assert ok


def test_end_to_end_benchmark(benchmark):
    r = benchmark
    order = r["AC_partial"] >= r["AC_full"] >= r["AC_flat"]
    ok = order and r["PD"] <= 0.15 and r["wall"] < 600
    record(8, ok, f"AC partial {r['AC_partial']:.4f} / full {r['AC_full']:.4f} / flat "
                  f"{r['AC_flat']:.4f}; PD {r['PD']:.4f}; thresholds "
                  f"{[round(t, 3) for t in r['thresholds']]}; C {r['C']}; {r['wall']:.0f} s")
    assert ok


def test_part_count_sweep():
    cfg = PipelineConfig(synth_images_per_species=16, max_iter=3)
    samples = [Sample(*row) for row in generate(cfg.gen_config())]
    rows = k_sweep(samples, cfg, (4, 6, 8, 10))
    table = sweep_table(rows)
    print(table)
    ok = [row["k"] for row in rows] == [4, 6, 8, 10] and PipelineConfig().k == 6
    record(9, ok, "sweep over K = 4, 6, 8, 10 completed (5 species x 16 images); default K = "
                  f"{PipelineConfig().k}; AC full " + ", ".join(f"K{row['k']}={row['AC_full']:.3f}"
                                                               for row in rows))
    assert ok


def test_metrics():
    from fishrec.classifier import PartialLabel
    f1 = f1_score(0.971, 0.989)
    recs = [PredictionRecord(str(i), "t", s, PartialLabel(("+",), True, s)) for i, s in enumerate("ABCAB")]
    m = compute_metrics(recs)
    ok = abs(f1 - 0.9799) <= 1e-4 and (m.ap, m.ar, m.ac, m.pd) == (1.0, 1.0, 1.0, 0.0)
    record(10, ok, f"F1(0.971, 0.989) = {f1:.5f}; perfect report AP/AR/AC/PD = "
                   f"{m.ap}/{m.ar}/{m.ac}/{m.pd}")
    assert ok


def test_public_fish_subset():
    root = os.environ.get("FISHREC_F4K")
    if not root or not os.path.isdir(root):
        record(11, "SKIP", "FISHREC_F4K not set, public data absent")
        pytest.skip("public fish dataset not available")
    samples = load_dataset(root)
    if len(samples) < 1000:
        record(11, "SKIP", f"only {len(samples)} images, need >= 1000")
        pytest.skip("public subset too small")
    res = run_benchmark(samples, PipelineConfig())
    ok = res["AC_partial"] >= res["AC_flat"] + 0.01
    record(11, ok, f"AC partial {res['AC_partial']:.4f} vs flat {res['AC_flat']:.4f} "
                   f"on {len(samples)} images")
    assert ok
