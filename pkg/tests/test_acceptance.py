"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION k: PASS|FAIL`` line with the measured
numbers, then asserts.  Criterion 9 runs only when the state income
extracts are supplied through MFHBOOT_DATA_1984 and MFHBOOT_DATA_1987.
"""

import io
import os
import time

import numpy as np
import pytest

from mfhboot.baselines import ufh_interval
from mfhboot.bootstrap import BootstrapOptions, confidence_interval
from mfhboot.cli import example_path, main
from mfhboot.errors import DegenerateVariance, MFHError
from mfhboot.estimation import FitOptions, em_fit, fit_structured
from mfhboot.io import parse_dataset, write_dataset
from mfhboot.model import (CovarianceKind, CovarianceModel, Dataset, LinearTarget,
                           ParamVector, covariance_matrix, correlation_matrix,
                           psi_from_covariance)
from mfhboot.prediction import predict
from mfhboot.simulation import (SimulationConfig, coverage_study, equicorrelated,
                                length_comparison)

from conftest import random_dataset, random_spd
from oracles import (dense_profile, multistart_structured, multistart_unstructured,
                     posterior_draws)

UN, ST, RW = CovarianceKind.UNSTRUCTURED, CovarianceKind.STATIONARY_TS, CovarianceKind.RANDOM_WALK_TS
WORKERS = os.cpu_count() or 1
NUMERIC = ("lower", "upper", "q1", "q2", "alpha", "mu_hat", "sigma_hat", "B_effective",
           "n_failed")


@pytest.fixture
def criterion(capsys):
    def report(k, ok, detail):
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}"
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return report


@pytest.fixture(scope="module")
def main_study():
    cfg = SimulationConfig(m=40, s=3, true_cov=equicorrelated(3, 8.0, 0.8), R=300, B=300,
                           alpha=0.05, methods=("MFH", "DIR"), master_seed=1,
                           workers=WORKERS)
    start = time.perf_counter()
    report = coverage_study(cfg)
    return report, time.perf_counter() - start


def test_criterion_1_coverage(main_study, criterion):
    report, seconds = main_study
    s = report.summary("MFH")
    d = report.summary("DIR")
    criterion(1, 92.0 <= s["CR"] <= 97.5,
              f"MFH CR={s['CR']:.2f}% over {s['n']} intervals ({s['failures']} failed "
              f"repetitions), DIR CR={d['CR']:.2f}%, {seconds:.0f}s with {WORKERS} worker(s)")


def test_criterion_2_coverage_improves_with_m(criterion):
    dist = {}
    crs = {}
    for m in (15, 60):
        crs[m] = []
        for seed in (1, 2, 3):
            cfg = SimulationConfig(m=m, s=3, true_cov=equicorrelated(3, 8.0, 0.8), R=100,
                                   B=300, methods=("MFH",), master_seed=seed, workers=WORKERS)
            crs[m].append(coverage_study(cfg).summary("MFH"))
        dist[m] = float(np.mean([abs(x["CR"] - 95.0) for x in crs[m]]))
    detail = "; ".join(
        f"m={m}: CR " + ", ".join(f"{x['CR']:.2f}" for x in crs[m])
        + f" (failed reps {sum(x['failures'] for x in crs[m])}), mean |CR-95|={dist[m]:.2f}"
        for m in (15, 60))
    criterion(2, dist[60] <= dist[15] - 1.5,
              f"{detail}; need {dist[60]:.2f} <= {dist[15]:.2f} - 1.5")


def test_criterion_3_length_ordering(main_study, criterion):
    report, _ = main_study
    mfh, dr = report.summary("MFH")["Len1"], report.summary("DIR")["Len1"]
    rho = report.length_gap_spearman("MFH", "DIR")
    criterion(3, mfh < dr and rho > 0.5,
              f"mean length MFH={mfh:.3f} < DIR={dr:.3f}; Spearman(trace D_i, DIR-MFH)={rho:.3f}")


def test_criterion_4_conditional_moments(criterion):
    rng = np.random.default_rng(4)
    worst_z, worst_rel = 0.0, 0.0
    for _ in range(20):
        m, s = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        ds, _ = random_dataset(rng, m, s, p_per=1)
        beta, A = rng.standard_normal(ds.p), random_spd(rng, s, 0.3, 3.0)
        c = rng.standard_normal(m * s)
        pred = predict(ds, ParamVector(beta, psi_from_covariance(A)), CovarianceModel(UN, s), c)
        T = posterior_draws(ds, beta, A, 1_000_000, rng) @ c
        se = T.std() / np.sqrt(T.size)
        worst_z = max(worst_z, abs(T.mean() - pred.mu_T) / se)
        worst_rel = max(worst_rel, abs(T.std() / pred.sigma_T - 1))
    criterion(4, worst_z < 4 and worst_rel < 0.01,
              f"20 instances, worst |mean error|={worst_z:.2f} SE, worst sd error={worst_rel:.4f}")


def _structured_instance(kind, truth, seed):
    rng = np.random.default_rng(seed)
    cm = CovarianceModel(kind, 4)
    A = np.array(covariance_matrix(cm, truth))
    X = np.broadcast_to(np.eye(4), (60, 4, 4)).copy()
    D = np.array([random_spd(rng, 4, 0.3, 1.0) for _ in range(60)])
    theta = X @ np.arange(1.0, 5.0) + rng.standard_normal((60, 4)) @ np.linalg.cholesky(A).T
    e = np.einsum("iab,ib->ia", np.linalg.cholesky(D), rng.standard_normal((60, 4)))
    return Dataset(None, theta + e, D, X), cm


def test_criterion_5_em(criterion):
    rng = np.random.default_rng(5)
    worst_drop = 0.0
    for k in range(100):
        s = int(rng.integers(1, 4))
        A = random_spd(rng, s, 0.05, 4.0) if k % 4 else random_spd(rng, s, 0.001, 0.05)
        ds, _ = random_dataset(rng, int(rng.integers(8, 41)), s, A=A)
        trace = np.asarray(em_fit(ds, CovarianceModel(UN, s)).loglik_trace)
        worst_drop = max(worst_drop, float(-np.min(np.diff(trace), initial=0.0)))

    scalar = Dataset(None, [[-1.0], [0.0], [1.0]], np.full((3, 1, 1), 0.5), np.ones((3, 1, 1)))
    a_hat = em_fit(scalar, CovarianceModel(UN, 1), FitOptions(tol=1e-12)).A_hat[0, 0]
    grid = np.linspace(0.0, 2.0, 200_001)
    prof = [dense_profile(scalar.y, scalar.X, scalar.D, np.array([[a]])) for a in grid]
    a_grid = grid[int(np.argmax(prof))]

    gaps = []
    for seed in range(3):
        ds, _ = random_dataset(np.random.default_rng(50 + seed), 40, 2)
        ll_oracle, _ = multistart_unstructured(ds, n_starts=10, seed=seed)
        gaps.append(em_fit(ds, CovarianceModel(UN, 2)).loglik - ll_oracle)
    for kind, truth, bounds in ((ST, [1.0, 0.5, 0.5], [(1e-6, 5.0), (-0.95, 0.95), (1e-6, 5.0)]),
                                (RW, [0.5, 0.5], [(1e-6, 5.0), (1e-6, 5.0)])):
        ds, cm = _structured_instance(kind, truth, 55)
        ll_oracle, _ = multistart_structured(
            ds, lambda psi, cm=cm: np.array(covariance_matrix(cm, psi)), bounds, n_starts=6)
        gaps.append(fit_structured(ds, cm).loglik - ll_oracle)
    gap = float(np.max(np.abs(gaps)))
    ok = worst_drop <= 1e-10 and abs(a_hat - 1 / 6) < 1e-4 and abs(a_grid - a_hat) < 1e-4 \
        and gap <= 1e-6
    criterion(5, ok, f"largest trace decrease {worst_drop:.1e} over 100 fits; scalar A_hat="
                     f"{a_hat:.6f} (grid {a_grid:.5f}, exact 1/6); largest |loglik - oracle| "
                     f"{gap:.1e} over 3 unstructured and 2 structured fits")


def test_criterion_6_univariate_reduction(criterion):
    rng = np.random.default_rng(6)
    mismatches, raised = 0, 0
    for k in range(20):
        m = int(rng.integers(15, 41))
        ds, _ = random_dataset(rng, m, 1, A=np.array([[rng.uniform(1.0, 4.0)]]))
        # a generous redraw cap: refits with a zero variance are common at small m
        opts = BootstrapOptions(seed=k, B=100, max_failures=30)
        area = int(rng.integers(m))
        outcome = []
        for run in (lambda: ufh_interval(ds, 0, None, 0.05, opts, target=area),
                    lambda: confidence_interval(ds, CovarianceModel(UN, 1),
                                                LinearTarget.unit(m, 1, area, 0), 0.05, opts)):
            try:
                r = run()
                outcome.append(tuple(getattr(r, f) for f in NUMERIC))
            except MFHError as exc:
                # the univariate side reports a zero variance as UfhZeroVariance
                outcome.append("DegenerateVariance" if isinstance(exc, DegenerateVariance)
                               else type(exc).__name__)
        if isinstance(outcome[0], str):
            raised += 1
        mismatches += outcome[0] != outcome[1]
    criterion(6, mismatches == 0,
              f"{20 - mismatches}/20 instances bitwise identical ({raised} raised the same "
              "error in both pipelines)")


def test_criterion_7_parallel_determinism(criterion):
    ds = parse_dataset(example_path())
    cm = CovarianceModel(UN, 3)
    c = LinearTarget.from_triples(ds.m, 3, [(2, 1, 1.0), (11, 1, -1.0)])
    intervals = [confidence_interval(ds, cm, c, 0.05, BootstrapOptions(seed=7, B=200, workers=w))
                 for w in (1, 4, 8)]
    same_ci = intervals[0] == intervals[1] == intervals[2]
    cfg = dict(m=12, s=2, true_cov=equicorrelated(2, 4.0, 0.6), R=8, B=100,
               methods=("MFH", "UFH", "DIR"), master_seed=7)
    reports = [coverage_study(SimulationConfig(**cfg, workers=w)) for w in (1, 4, 8)]
    same_cov = reports[0].identical(reports[1]) and reports[0].identical(reports[2])
    criterion(7, same_ci and same_cov,
              f"confidence_interval identical at 1/4/8 workers: {same_ci}; "
              f"coverage_study identical: {same_cov}")


def test_criterion_8_degenerate_variance(criterion, tmp_path):
    ds = parse_dataset(example_path())
    flat = ds.with_y(ds.X @ np.arange(1.0, ds.p + 1))
    opts = BootstrapOptions(seed=8, B=100)
    names = []
    for run in (lambda: confidence_interval(flat, CovarianceModel(UN, 3),
                                            LinearTarget.unit(ds.m, 3, 0, 1), 0.05, opts),
                lambda: ufh_interval(flat, 1, None, 0.05, opts)):
        try:
            run()
            names.append(None)
        except MFHError as exc:
            names.append(type(exc).__name__)
    path = tmp_path / "flat.csv"
    write_dataset(flat, path)
    err = io.StringIO()
    status = main(["ci", "--data", str(path), "--seed", "8", "--B", "100", "--target", "A01:2"],
                  io.StringIO(), err)
    ok = names == ["DegenerateVariance", "UfhZeroVariance"] and status == 3 \
        and "DegenerateVariance" in err.getvalue()
    criterion(8, ok, f"MFH raised {names[0]}, UFH raised {names[1]}, ci exit {status}, "
                     f"stderr: {err.getvalue().strip()[:60]}...")


# published reference values: correlations of A_hat and interval-length summaries
# for four-person family income
REFERENCE_CORR = {
    "1984": np.array([[1, 0.171, 0.938], [0.171, 1, 0.200], [0.938, 0.200, 1]]),
    "1987": np.array([[1, 0.780, 0.587], [0.780, 1, 0.915], [0.587, 0.915, 1]]),
}
REFERENCE_LENGTHS = {
    "1984": {"MFH": [4.12, 5.55, 6.13, 6.02, 6.38, 8.28],
             "UFH": [4.21, 5.78, 6.42, 6.32, 6.72, 8.44],
             "DIR": [3.96, 6.66, 7.75, 8.00, 8.84, 21.30]},
    # this block is published under a 1988 label; it belongs to the 1987 data
    "1987": {"MFH": [4.54, 6.08, 6.78, 6.74, 7.23, 12.87],
             "UFH": [5.86, 7.60, 8.57, 8.39, 8.95, 11.85],
             "DIR": [6.18, 8.23, 10.71, 10.84, 12.15, 32.39]},
}


@pytest.mark.skipif(not (os.environ.get("MFHBOOT_DATA_1984")
                         and os.environ.get("MFHBOOT_DATA_1987")),
                    reason="state income extracts not supplied "
                           "(set MFHBOOT_DATA_1984 and MFHBOOT_DATA_1987)")
def test_criterion_9_income_data(criterion):
    worst_corr, worst_table = 0.0, 0.0
    for year in ("1984", "1987"):
        ds = parse_dataset(os.environ[f"MFHBOOT_DATA_{year}"])
        fitted = em_fit(ds, CovarianceModel(UN, 3))
        R = correlation_matrix(fitted.A_hat)
        worst_corr = max(worst_corr, float(np.max(np.abs(R - REFERENCE_CORR[year]))))
        lc = length_comparison(ds, 1, B=1000, seed=int(year), workers=WORKERS)
        for method, stats in lc.summary().items():
            got = np.array(list(stats.values()))
            worst_table = max(worst_table, float(np.max(np.abs(got - REFERENCE_LENGTHS[year][method]))))
    criterion(9, worst_corr <= 0.02 and worst_table <= 0.1,
              f"largest correlation error {worst_corr:.3f}, largest length-summary error {worst_table:.3f}")
