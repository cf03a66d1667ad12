"""Acceptance gate. Each test checks one criterion at its stated tolerance and
logs a PASS/FAIL line that is printed in the terminal summary.

The sweep-based criteria (5, 8, 9, 10) train the full-size model on the
400-region synthetic benchmark and take roughly 20-25 minutes on one core.
Deselect them with ``-m "not acceptance"`` for a quick run.
"""

import json
import math
import os
import time
from datetime import date

import numpy as np
import pytest

from dpfedcast import federation
from dpfedcast.accountant import (
    C_TOLERANCE,
    calibrate_noise_multiplier,
    epsilon_for,
    gaussian_rdp,
    rdp_to_eps,
    subsampled_curve,
    subsampled_gaussian_rdp,
)
from dpfedcast.benchmark import make_benchmark
from dpfedcast.data import (
    Community,
    RegionSeries,
    WindowConfig,
    build_windows,
    synthesize_communities,
    write_case_csv,
)
from dpfedcast.experiment import run_experiment, validate_config
from dpfedcast.mlp import DEFAULT_LAYERS, batch_loss_and_grad, init_params, l2_norm, predict

LEVELS = (0.3, 0.5, 1.0, 2.0)
DP_RUNS = 5
NON_DP_RUNS = int(os.environ.get("DPFEDCAST_NONDP_RUNS", "15"))
MASTER_SEED = 2022
_DAY0 = date(2022, 3, 1)


def check(log, number, name, ok, detail):
    log.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


# --- fast criteria -----------------------------------------------------------


def _fd_loss(params, X, y):
    return float(np.mean((predict(params, X) - y) ** 2))


def _worst_relative_error(params, X, y, coords, h=1e-5):
    _, grad = batch_loss_and_grad(params, (X, y))
    worst = 0.0
    for j in coords:
        e = np.zeros(params.n_params)
        e[j] = h
        num = (_fd_loss(params.apply_update(e), X, y) - _fd_loss(params.apply_update(-e), X, y)) / (2 * h)
        scale = max(abs(num), abs(grad[j]))
        if scale > 1e-6:
            worst = max(worst, abs(num - grad[j]) / scale)
    return worst


def test_1_gradient_matches_finite_differences(criterion_log):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for k in range(20):
        hidden = tuple(int(n) for n in rng.integers(2, 9, rng.integers(1, 4)))
        sizes = (int(rng.integers(2, 11)), *hidden, 1)
        p = init_params(sizes, seed=k)
        p = p.apply_update(rng.normal(0, 0.1, p.n_params))
        X = rng.uniform(0, 3, (int(rng.integers(1, 12)), sizes[0]))
        y = rng.uniform(0, 3, len(X))
        worst = max(worst, _worst_relative_error(p, X, y, range(p.n_params)))
    for k in range(2):
        p = init_params(DEFAULT_LAYERS, seed=100 + k)
        p = p.apply_update(rng.normal(0, 0.05, p.n_params))
        X = rng.uniform(0, 3, (8, 10))
        y = rng.uniform(0, 3, 8)
        worst = max(worst, _worst_relative_error(p, X, y, rng.choice(p.n_params, 150, replace=False)))
    elapsed = time.perf_counter() - start
    check(criterion_log, 1, "gradient check", worst < 1e-4 and elapsed < 1.0,
          f"22 instances, worst relative error {worst:.2e} (< 1e-4), {elapsed:.2f}s (< 1s)")


def test_2_accountant_closed_form_at_full_sampling(criterion_log):
    start = time.perf_counter()
    worst = max(abs(subsampled_gaussian_rdp(1.0, c, a) - gaussian_rdp(c, a))
                for c in (0.5, 1.0, 2.0) for a in range(2, 65))
    elapsed = time.perf_counter() - start
    check(criterion_log, 2, "q=1 reduces to the Gaussian closed form", worst <= 1e-6 and elapsed < 1.0,
          f"max deviation {worst:.1e} (<= 1e-6), {elapsed:.3f}s")


def test_3_accountant_conversion(criterion_log):
    start = time.perf_counter()
    grid = np.linspace(1.001, 100, 1_000_000)
    oracle = float(np.min(grid / 2 + math.log(1e5) / (grid - 1)))
    eps, alpha = rdp_to_eps(subsampled_curve(1.0, 1.0), 1e-5)
    elapsed = time.perf_counter() - start
    ok = abs(eps - oracle) < 0.01 and abs(oracle - 5.2985) < 1e-3 and elapsed < 1.0
    check(criterion_log, 3, "epsilon conversion", ok,
          f"epsilon {eps:.4f} at order {alpha:g}, dense-grid oracle {oracle:.4f} (within 0.01), {elapsed:.3f}s")


def test_4_calibration_round_trip(criterion_log):
    start = time.perf_counter()
    rows, ok = [], True
    for target in LEVELS:
        c = calibrate_noise_multiplier(target, 1e-3, 0.1, 75)
        at = epsilon_for(c, 1e-3, 0.1, 75)[0]
        below = epsilon_for(c - 2 * C_TOLERANCE, 1e-3, 0.1, 75)[0]
        ok &= at <= target < below
        rows.append(f"eps={target:g}: c={c:.4f}")
    elapsed = time.perf_counter() - start
    check(criterion_log, 4, "calibration round trip", ok and elapsed < 5.0, f"{', '.join(rows)}; {elapsed:.2f}s (< 5s)")


def test_6_windowing_oracle(criterion_log):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        L, H, P = int(rng.integers(0, 80)), int(rng.integers(1, 15)), int(rng.integers(1, 10))
        values = rng.integers(0, 500, L).astype(float)
        got = build_windows(RegionSeries("A", _DAY0, values), WindowConfig(H, P))
        expected = [(values[t - H + 1:t + 1].tolist(), values[t + P])
                    for t in range(H - 1, L - P)]
        same = len(got) == len(expected) == max(0, L - H - P + 1) and all(
            s.x.tolist() == x and s.y == y for s, (x, y) in zip(got, expected))
        mismatches += not same
    check(criterion_log, 6, "windowing oracle", mismatches == 0, f"{mismatches} mismatches in 1000 random series")


def test_7_disaggregation(criterion_log):
    rng = np.random.default_rng(7)
    broken = 0
    for k in range(100):
        county = RegionSeries("K", _DAY0, rng.integers(0, 10000, rng.integers(1, 60)).astype(float))
        table = {f"c{j}": Community("K", int(p)) for j, p in enumerate(rng.integers(1, 10**6, rng.integers(1, 20)))}
        parts = synthesize_communities(county, table, seed=k)
        broken += not np.array_equal(sum(s.values for s in parts.values()), county.values)
    county = RegionSeries("K", _DAY0, np.array([5000.0]))
    table = {"a": Community("K", 3000), "b": Community("K", 7000)}
    share = np.mean([synthesize_communities(county, table, seed=s)["a"].values[0] for s in range(1000)]) / 5000
    ok = broken == 0 and abs(share - 0.3) / 0.3 < 0.01
    check(criterion_log, 7, "disaggregation", ok,
          f"{broken}/100 instances break daily totals; Monte Carlo share {share:.4f} vs 0.3 (within 1%)")


# --- sweep criteria ------------------------------------------------------------


class _ClipSpy:
    """Wraps the aggregation step and records the norm of every incoming update."""

    def __init__(self, real):
        self.real = real
        self.norms = []
        self.active = False

    def __call__(self, updates, m, dim=None):
        if self.active:
            self.norms.extend(l2_norm(u) for u in updates)
        return self.real(updates, m, dim)


@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cases = root / "benchmark.csv"
    write_case_csv(make_benchmark(), cases)
    spy = _ClipSpy(federation.aggregate)
    federation.aggregate = spy
    try:
        base = dict(cases=str(cases), seed=MASTER_SEED, eval_every=0)
        start = time.perf_counter()
        spy.active = True
        dp = run_experiment(validate_config(base | dict(output=str(root / "dp"), epsilon=LEVELS, runs=DP_RUNS)))
        spy.active = False
        non_dp = run_experiment(validate_config(base | dict(output=str(root / "nondp"), epsilon=(math.inf,),
                                                            runs=NON_DP_RUNS)))
        elapsed = time.perf_counter() - start
    finally:
        federation.aggregate = spy.real
    return dict(root=root, cases=cases, dp=dp, non_dp=non_dp, clip_norms=spy.norms, elapsed=elapsed)


def _r2(result, eps):
    return [r.r2 for r in result.reports(eps)]


@pytest.mark.acceptance
def test_5_clipping_invariant(sweep, criterion_log):
    norms = sweep["clip_norms"]
    worst = max(norms) if norms else math.nan
    ok = bool(norms) and worst <= 0.5 + 1e-9
    check(criterion_log, 5, "clipping invariant", ok,
          f"{len(norms)} aggregated client updates over {len(LEVELS) * DP_RUNS} DP runs, max norm {worst:.12f} (<= 0.5 + 1e-9)")


@pytest.mark.acceptance
def test_8_non_dp_benchmark(sweep, criterion_log):
    result = sweep["non_dp"]
    assert result.ok, [c.error for c in result.cells if not c.ok]
    r2 = _r2(result, math.inf)
    mape = [r.mape_percent for r in result.reports(math.inf)]
    mean_r2 = float(np.mean(r2))
    check(criterion_log, 8, "non-DP on the synthetic benchmark", mean_r2 >= 0.95 and len(r2) == NON_DP_RUNS,
          f"R2 {mean_r2:.4f} +/- {np.std(r2, ddof=1):.4f} over {len(r2)} runs (>= 0.95; min {min(r2):.4f}), "
          f"MAPE {np.mean(mape):.2f}% (informational), sweep time {sweep['elapsed'] / 60:.1f} min")


@pytest.mark.acceptance
def test_9_privacy_utility_ordering(sweep, criterion_log):
    dp = sweep["dp"]
    assert dp.ok, [c.error for c in dp.cells if not c.ok]
    med = {eps: float(np.median(_r2(dp, eps))) for eps in LEVELS}
    # the non-DP runs 0..4 share seeds with the DP runs
    med[math.inf] = float(np.median(_r2(sweep["non_dp"], math.inf)[:DP_RUNS]))
    ok = med[0.5] < med[1.0] < med[2.0] <= med[math.inf] and med[0.3] < 0
    detail = ", ".join(f"eps={'inf' if math.isinf(e) else f'{e:g}'}: {v:.4g}" for e, v in med.items())
    check(criterion_log, 9, "privacy-utility ordering", ok, f"median R2 over {DP_RUNS} seeds: {detail}")


@pytest.mark.acceptance
def test_9b_real_export_threshold(criterion_log):
    criterion_log.append("criterion 9b: SKIP eps=2 median R2 >= 0.8 applies to the real county export, "
                         "which is not available here")
    pytest.skip("real county export unavailable; threshold not applicable to the synthetic benchmark")


@pytest.mark.acceptance
def test_10_determinism(sweep, tmp_path, criterion_log):
    cases = sweep["cases"]
    small = dict(cases=str(cases), seed=MASTER_SEED, T_cl=6, E=3, runs=2, epsilon=LEVELS + (math.inf,), eval_every=0)
    run_experiment(validate_config(small | dict(output=str(tmp_path / "a"))))
    run_experiment(validate_config(small | dict(output=str(tmp_path / "b"))))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("metrics.json"))
    same_small = len(files) == 10 and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    # one full-size cell replayed against the main sweep
    replay = run_experiment(validate_config(dict(cases=str(cases), seed=MASTER_SEED, runs=1, epsilon=(2.0,),
                                                 eval_every=0, output=str(tmp_path / "replay"))))
    assert replay.ok
    original = (sweep["root"] / "dp" / "eps_2" / "run_00" / "metrics.json").read_bytes()
    replayed = (tmp_path / "replay" / "eps_2" / "run_00" / "metrics.json").read_bytes()
    r2 = json.loads(replayed)["metrics"]["r2"]
    check(criterion_log, 10, "determinism", same_small and original == replayed,
          f"{len(files)} metrics.json files identical across two reduced sweeps; "
          f"full-size eps=2 run 0 replays byte-identically (R2 {r2:.4f})")
