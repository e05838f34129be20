"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are printed in
the terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import special, stats

from certagg.cli import main
from certagg.core import (
    CertifiedCurve,
    LabelDistribution,
    RadiusGrid,
    SimplexWeights,
    combine_curves,
    empirical_curve,
    mix_distributions,
    residual,
)
from certagg.estimators import check_theorem1, estimate_ap, estimate_ga, estimate_vw, extremal_distribution
from certagg.harness import TargetSpec, build_target, load_config, metric_rmse
from certagg.harness.experiment import _oracle_clients, _partition
from certagg.simplexopt import kkt_gap, solve_simplex_ls
from certagg.smoothing import (
    ConstantClassifier,
    SmoothingParams,
    ThresholdClassifier,
    binom_lower_bound,
    certify_point,
    inv_std_normal_cdf,
)
from certagg.synthdata import OracleModel, ground_truth_curve

GRID = RadiusGrid.uniform()
UNIFORM_TARGET = {"target.mode": "explicit", "target.probs": ",".join(["0.1"] * 10)}


def bisect(f, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def quantile_oracle(p):
    if p <= 0.5:
        return bisect(lambda z: special.ndtr(z) - p, -40.0, 40.0)
    return bisect(lambda z: (1 - p) - special.ndtr(-z), -40.0, 40.0)


def clopper_pearson_oracle(k, n, alpha):
    """P(Bin(n, p) >= k) is the regularized incomplete beta I_p(k, n - k + 1)."""
    if k == 0:
        return 0.0
    return bisect(lambda p: special.betainc(k, n - k + 1, p) - alpha, 0.0, 1.0)


def oracle_scenario(seed, **overrides):
    cfg = load_config(overrides={"experiment.seed": str(seed), **overrides})
    oracle, clients = _oracle_clients(cfg, _partition(cfg))
    return cfg, oracle, clients


def test_criterion_01_pooled_identity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(500):
        k = int(rng.integers(1, 11))
        radii = []
        for _ in range(k):
            n = int(rng.integers(1, 1001))
            r = rng.choice(np.concatenate([[-1.0], GRID.radii, rng.uniform(0, 1.2, 5)]), size=n)
            radii.append(r)
        n = np.array([len(r) for r in radii], dtype=float)
        combined = combine_curves(n / n.sum(), [empirical_curve(r, GRID) for r in radii]).values
        pooled = np.concatenate(radii)
        recount = np.array([np.count_nonzero(pooled >= r) / pooled.size for r in GRID.radii])
        worst = max(worst, float(np.max(np.abs(combined - recount))))
    elapsed = time.perf_counter() - start
    ok = verdict(1, "volume-weighted curves equal the pooled curve", worst <= 1e-12 and elapsed < 10,
                 f"max error {worst:.2e} over 500 instances in {elapsed:.1f}s")
    assert ok


def test_criterion_02_mixture_identity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(500):
        m, k = int(rng.integers(2, 11)), int(rng.integers(1, 11))
        oracle = OracleModel.exponential(GRID, m, seed=i)
        dists = [LabelDistribution(rng.dirichlet(np.ones(m))) for _ in range(k)]
        w = SimplexWeights(rng.dirichlet(np.ones(k)))
        lhs = ground_truth_curve(oracle, mix_distributions(w, dists)).values
        rhs = combine_curves(w, [ground_truth_curve(oracle, d) for d in dists]).values
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    elapsed = time.perf_counter() - start
    ok = verdict(2, "truth of a mixture is the mixture of truths", worst <= 1e-12 and elapsed < 10,
                 f"max error {worst:.2e} over 500 instances in {elapsed:.1f}s")
    assert ok


def test_criterion_03_error_bound(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    violations, checked = 0, 0
    for i in range(1000):
        m, k = int(rng.integers(2, 11)), int(rng.integers(1, 11))
        oracle = OracleModel.exponential(GRID, m, seed=rng.integers(2**63))
        dists = [LabelDistribution(rng.dirichlet(np.ones(m))) for _ in range(k)]
        target = LabelDistribution(rng.dirichlet(np.ones(m)))
        for row in check_theorem1(oracle, target, dists, rng.dirichlet(np.ones(k))):
            checked += 1
            violations += not row.holds

    tight_err = 0.0
    for i in range(100):
        m = int(rng.integers(2, 11))
        oracle = OracleModel.exponential(GRID, m, seed=rng.integers(2**63))
        target = LabelDistribution(rng.dirichlet(np.full(m, 4.0)))
        k = int(rng.integers(len(GRID)))
        delta = float(rng.uniform(0.1, 0.9)) * target.probs.min()
        moved = extremal_distribution(oracle.matrix()[:, k], target, delta)
        row = check_theorem1(oracle, target, [moved], [1.0])[k]
        tight_err = max(tight_err, abs(row.gap - row.delta * row.q), abs(row.delta - delta))
    elapsed = time.perf_counter() - start
    ok = violations == 0 and tight_err <= 1e-9 and elapsed < 60
    verdict(3, "H <= delta * Q with an attaining direction", ok,
            f"{violations} violations in {checked} radius checks, extremal gap error {tight_err:.1e}, {elapsed:.1f}s")
    assert ok


def point_to_segment(p, a, b):
    d = b - a
    t = np.clip((p - a) @ d / (d @ d), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * d)))


def test_criterion_04_simplex_solver(verdict):
    rng = np.random.default_rng(404)
    worst_kkt, worst_dom, worst_seg = 0.0, -np.inf, 0.0
    for _ in range(200):
        m, k = int(rng.integers(2, 11)), int(rng.integers(1, 21))
        dists = [LabelDistribution(rng.dirichlet(np.full(m, 0.5))) for _ in range(k)]
        target = LabelDistribution(rng.dirichlet(np.ones(m)))
        rep = solve_simplex_ls(target, dists)
        D = np.stack([d.probs for d in dists], axis=1)
        worst_kkt = max(worst_kkt, kkt_gap(D, target.probs, rep.weights.alphas))
        volumes = rng.integers(1, 1000, k)
        worst_dom = max(worst_dom, rep.residual - residual(target, volumes / volumes.sum(), dists))
    for _ in range(200):
        m = int(rng.integers(2, 11))
        a, b, t = (LabelDistribution(rng.dirichlet(np.ones(m))) for _ in range(3))
        rep = solve_simplex_ls(t, [a, b])
        worst_seg = max(worst_seg, abs(rep.residual - point_to_segment(t.probs, a.probs, b.probs)))
    ok = worst_kkt <= 1e-6 and worst_dom <= 1e-9 and worst_seg <= 1e-6
    verdict(4, "simplex least squares", ok,
            f"KKT gap {worst_kkt:.1e}, excess over volume weights {worst_dom:.1e}, segment error {worst_seg:.1e}")
    assert ok


def test_criterion_05_bound_and_quantile_oracles(verdict):
    rng = np.random.default_rng(505)
    cp_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 2001))
        k = int(rng.integers(0, n + 1))
        alpha = float(10 ** rng.uniform(-6, np.log10(0.5)))
        cp_err = max(cp_err, abs(binom_lower_bound(k, n, alpha) - clopper_pearson_oracle(k, n, alpha)))
    ps = np.concatenate([np.logspace(-12, -2, 250), np.linspace(0.01, 0.99, 500), 1 - np.logspace(-2, -12, 250)])
    q_err = max(abs(inv_std_normal_cdf(float(p)) - quantile_oracle(float(p))) for p in ps)
    closed_err = max(abs(binom_lower_bound(n, n, a) - a ** (1 / n))
                     for n in (1, 2, 10, 100, 1000, 10_000) for a in (1e-6, 0.001, 0.05, 0.3))
    ok = cp_err <= 1e-9 and q_err <= 1e-9 and closed_err <= 1e-12
    verdict(5, "Clopper-Pearson and inverse normal", ok,
            f"bound error {cp_err:.1e}, quantile error {q_err:.1e} on {ps.size} points, k = n error {closed_err:.1e}")
    assert ok


def test_criterion_06_certify_soundness(verdict):
    params = SmoothingParams(sigma=0.1, n0=100, n=1000, alpha_conf=0.001)
    radius = certify_point(ConstantClassifier(0, 10), np.zeros(3), params, seed=0).radius
    derived = 0.1 * stats.norm.ppf(0.001 ** (1 / 1000))

    sigma, p_a, alpha, trials = 1.0, 0.9, 0.001, 10_000
    clf = ThresholdClassifier(sigma * stats.norm.ppf(p_a))
    sound = SmoothingParams(sigma=sigma, n0=100, n=1000, alpha_conf=alpha)
    exceed = 0
    for seed in range(trials):
        out = certify_point(clf, [0.0], sound, seed)
        true_share = p_a if out.label in (0, None) else 1 - p_a
        exceed += out.p_lower > true_share
    limit = alpha + 3 * np.sqrt(alpha * (1 - alpha) / trials)
    ok = abs(radius - derived) <= 1e-4 and exceed / trials <= limit
    verdict(6, "CERTIFY radius and lower-bound soundness", ok,
            f"R = {radius:.6f} (derived {derived:.6f}); overshoot rate {exceed / trials:.4f} <= {limit:.4f}")
    assert ok


def test_criterion_07_non_iid_advantage(verdict):
    start = time.perf_counter()
    rows = []
    for seed in range(10):
        cfg, oracle, clients = oracle_scenario(seed, **UNIFORM_TARGET)
        target = cfg.target.probs
        truth = ground_truth_curve(oracle, target)
        est = cfg.estimator_for_run
        rows.append([metric_rmse(estimate_vw(clients), truth),
                     metric_rmse(estimate_ap(clients, target, est).curve, truth),
                     metric_rmse(estimate_ga(clients, target, est).curve, truth)])
    rows = np.array(rows)
    elapsed = time.perf_counter() - start
    beats_vw = int(np.sum(rows[:, 2] <= rows[:, 0]))
    beats_ap = int(np.sum(rows[:, 2] <= rows[:, 1]))
    ok = beats_vw >= 9 and beats_ap >= 7 and elapsed < 300
    med = np.median(rows, axis=0)
    verdict(7, "grouped approximation wins on non-IID clients", ok,
            f"GA <= VW in {beats_vw}/10, GA <= AP in {beats_ap}/10; "
            f"median RMSE VW {med[0]:.4f} AP {med[1]:.4f} GA {med[2]:.4f}; {elapsed:.0f}s")
    assert ok


def test_criterion_08_gap_sweep(verdict):
    start = time.perf_counter()
    gaps = [0.2, 0.3, 0.4, 0.5, 0.6]
    vw = np.zeros((10, len(gaps)))
    ap = np.zeros(10)
    for seed in range(10):
        cfg, oracle, clients = oracle_scenario(seed)
        for g, gap in enumerate(gaps):
            spec = TargetSpec(mode="gap", gap=gap, concentration=cfg.target.concentration)
            target = build_target(spec, clients, seed)
            truth = ground_truth_curve(oracle, target)
            vw[seed, g] = metric_rmse(estimate_vw(clients), truth)
            if gap == gaps[-1]:
                ap[seed] = metric_rmse(estimate_ap(clients, target, cfg.estimator_for_run).curve, truth)
    elapsed = time.perf_counter() - start
    mean_vw = vw.mean(axis=0)
    rho = stats.spearmanr(gaps, mean_vw)[0]
    ratio = ap.mean() / mean_vw[-1]
    ok = rho >= 0.9 and ratio <= 0.5 and elapsed < 300
    verdict(8, "VW degrades with the distribution gap", ok,
            f"mean VW RMSE {np.round(mean_vw, 4).tolist()} (Spearman {rho:.2f}); "
            f"AP/VW at gap 0.6 = {ratio:.3f}; {elapsed:.0f}s")
    assert ok


def test_criterion_09_saturation_in_T(verdict):
    start = time.perf_counter()
    monotone = True
    rmse = {1000: [], 3000: []}
    for seed in range(10):
        cfg, oracle, clients = oracle_scenario(seed, **UNIFORM_TARGET)
        target = cfg.target.probs
        truth = ground_truth_curve(oracle, target)
        long = estimate_ga(clients, target, replace(cfg.estimator_for_run, T=3000))
        best_so_far = np.minimum.accumulate(long.residuals)
        monotone &= bool(np.all(np.diff(best_so_far) <= 0))
        short = estimate_ga(clients, target, cfg.estimator_for_run)
        monotone &= short.delta >= long.delta and short.delta == best_so_far[999]
        rmse[1000].append(metric_rmse(short.curve, truth))
        rmse[3000].append(metric_rmse(long.curve, truth))
    m1, m3 = np.median(rmse[1000]), np.median(rmse[3000])
    ok = monotone and m3 <= m1
    verdict(9, "performance saturates in T", ok,
            f"best-so-far delta non-increasing: {monotone}; median GA RMSE T=1000 {m1:.4f}, T=3000 {m3:.4f}; "
            f"{time.perf_counter() - start:.0f}s")
    assert ok


def _run_outputs(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["run", "--seed", "17", "--out", str(out), *extra]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_criterion_10_determinism(verdict, tmp_path):
    ini = tmp_path / "smooth.ini"
    ini.write_text("[experiment]\nmode = smoothing\n[partition]\nnum_clients = 20\n"
                   "class_totals = 40,30,20\n[estimator]\nT = 200\nE = 5\n[smoothing]\nheldout = 300\n"
                   "n = 200\nn0 = 20\n")
    first = _run_outputs(tmp_path, "a")
    second = _run_outputs(tmp_path, "b")
    parallel = _run_outputs(tmp_path, "c", "--workers", "8")
    smooth_1 = _run_outputs(tmp_path, "d", "--config", str(ini))
    smooth_8 = _run_outputs(tmp_path, "e", "--config", str(ini), "--workers", "8")
    names = ["curves.csv", "metrics.json", "partition.csv", "grouping.csv"]
    ok = all(set(names) <= set(o) for o in (first, smooth_1)) and first == second == parallel and smooth_1 == smooth_8
    verdict(10, "byte-identical reruns", ok,
            f"oracle run twice and with 8 workers identical: {first == second == parallel}; "
            f"smoothing run with 1 and 8 workers identical: {smooth_1 == smooth_8}")
    assert ok
