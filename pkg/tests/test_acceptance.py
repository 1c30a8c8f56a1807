"""Exit criteria. Each test prints one PASS/FAIL line; the session summary repeats them."""

import math
import os
import time

import numpy as np
import pytest

from positivity_ctmle.cli import main
from positivity_ctmle.estimators import (
    Dataset,
    OutcomeFit,
    OutcomeScaling,
    aipw,
    clever_covariate,
    empirical_loss,
    hajek_ipw,
    ipw,
    tmle_estimate,
)
from positivity_ctmle.selectors import (
    ctmle_select,
    cv_gamma_losses,
    cv_select_gamma,
    generate_candidates,
    make_folds,
    mv_risk,
    mv_select_gamma,
    tmle_over_grid,
)
from positivity_ctmle.simulation import (
    TABLE_METHODS,
    DgpConfig,
    SimulationSettings,
    fit_nuisances,
    monte_carlo_true_ses,
    run_replications,
    sample_dataset,
    starred_coverage,
)
from positivity_ctmle.truncation import TruncationGrid, make_grid, truncate_upper

from helpers import random_instance, record
from oracles import last_argmin, naive_candidates, naive_cv_losses, naive_mv_risk

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

JOBS = os.cpu_count() or 1
GRID = make_grid()
SMALL_GRIDS = [
    TruncationGrid.from_values([0.8, 0.85, 0.9, 0.95, 1.0]),
    TruncationGrid.from_values([0.6, 0.7, 0.9, 1.0]),
    TruncationGrid.from_values([0.9, 1.0]),
]
R_TABLE = 200
R_TRUE_SE = 1000


def property_datasets():
    """100 seeded DGP datasets (n = 200) with their fitted nuisances."""
    for seed in range(100):
        data = sample_dataset(DgpConfig(C=seed % 3, n=200, seed=seed), 0)
        ps, q0 = fit_nuisances(data, range(2, 10))
        yield data, ps, q0


def fluctuations(data, ps, q0):
    """(initial fit, targeted fit, truncated ps) for every fluctuation the estimators perform."""
    for gamma in GRID:
        ps_g = truncate_upper(ps, gamma)
        _, q_star = tmle_estimate(data, ps_g, q0)
        yield q0, q_star, ps_g
    seq = generate_candidates(q0, data, GRID, ps=ps)
    for c in seq.candidates.values():
        yield c.stage_initial, c.q_star, c.ps_truncated
    est, _, q_final = ctmle_select(q0, data, GRID, 5, 0, ps=ps)
    initial = seq[est.gamma].stage_initial
    yield initial, q_final, truncate_upper(ps, est.diagnostics["retarget_gamma"])


@pytest.fixture(scope="module")
def property_runs():
    start = time.perf_counter()
    runs = []
    for data, ps, q0 in property_datasets():
        y_s = q0.scaling.transform(data.Y)
        for initial, q_star, ps_g in fluctuations(data, ps, q0):
            score = abs(np.mean(clever_covariate(data.A, ps_g) * (y_s - q_star.q_aw)))
            runs.append((score, empirical_loss(q_star, y_s), empirical_loss(initial, y_s)))
    return np.array(runs), time.perf_counter() - start


def test_criterion_1_score_equation(property_runs):
    runs, seconds = property_runs
    with record(1, "TMLE score equation |P_n H (Y_s - Q*)| <= 1e-8 on 100 datasets") as r:
        r.detail = f"{len(runs)} fluctuations, max score {runs[:, 0].max():.2e}, {seconds:.1f}s"
        assert runs[:, 0].max() <= 1e-8
        assert seconds < 60


def test_criterion_2_fluctuation_monotone(property_runs):
    runs, _ = property_runs
    with record(2, "fluctuation never increases empirical loss (+1e-12)") as r:
        worst = float(np.max(runs[:, 1] - runs[:, 2]))
        r.detail = f"max increase {worst:.2e}"
        assert worst <= 1e-12


def test_criterion_3_oracle_equivalence():
    with record(3, "selectors match brute-force oracles; degenerate C-TMLE equals TMLE") as r:
        checked = 0
        for seed in range(4):
            data, ps, q0 = random_instance(100 + seed, n=40 + 2 * seed, p=2)
            for grid in SMALL_GRIDS:
                labels = make_folds(data.n, 5, seed).labels
                cv_oracle = naive_cv_losses(data, grid.gammas, labels, 5)
                assert np.allclose(cv_gamma_losses(data, grid, 5, seed), cv_oracle, rtol=1e-8, atol=1e-12)
                assert cv_select_gamma(data, grid, 5, seed) == grid.gammas[last_argmin(np.round(cv_oracle, 12))]

                var, bias2 = naive_mv_risk(data, ps, q0, grid.gammas, 2, seed)
                risk = mv_risk(data, grid, 2, seed, q0, ps)
                assert np.allclose(risk.variance, var, rtol=1e-8)
                assert np.allclose(risk.bias2, bias2, rtol=1e-6, atol=1e-12)
                assert mv_select_gamma(data, grid, 2, seed, q0, ps) == grid.gammas[last_argmin(np.round(var + bias2, 12))]

                seq = generate_candidates(q0, data, grid, ps=ps)
                oracle, points = naive_candidates(data, ps, q0, grid.gammas)
                assert list(seq.stage_points) == points
                for g, (stage, q, loss) in oracle.items():
                    assert seq[g].stage == stage
                    assert seq[g].empirical_L1 == pytest.approx(loss, rel=1e-9)
                    assert np.allclose(seq[g].q_star.eta_1w, q.eta_1w, atol=1e-8)
                checked += 1

            single = TruncationGrid.from_values([1.0])
            est, _, _ = ctmle_select(q0, data, single, 5, seed, ps=ps)
            plain, _ = tmle_estimate(data, ps, q0)
            assert abs(est.psi - plain.psi) <= 1e-12
        r.detail = f"{checked} instance/grid pairs"


def zero_outcome_fit(data):
    """OutcomeFit whose predictions are exactly 0 on the original scale."""
    eta = np.full(data.n, -np.inf)
    return OutcomeFit(eta, eta.copy(), eta.copy(), OutcomeScaling(0.0, 1.0))


def test_criterion_4_estimator_identities():
    with record(4, "Hajek shift invariance, A-IPW = IPW at Q = 0, gamma = 1 identity, TMLE range") as r:
        worst = {"hajek": 0.0, "aipw": 0.0}
        for seed in range(100):
            data, ps, q0 = random_instance(seed, n=200, p=5)
            base = hajek_ipw(data, ps)
            for c in (-50.0, 3.7, 1e3):
                shifted = Dataset(data.Y + c, data.A, data.W)
                worst["hajek"] = max(worst["hajek"], abs(hajek_ipw(shifted, ps) - base))
            zero = zero_outcome_fit(data)
            assert np.all(zero.unscaled()[1] == 0.0)
            worst["aipw"] = max(worst["aipw"], abs(aipw(data, ps, zero) - ipw(data, ps)))
            assert np.array_equal(truncate_upper(ps, 1.0), ps)
            width = q0.scaling.width
            for est in tmle_over_grid(data, ps, q0, GRID.gammas):
                assert -width <= est.psi <= width
        r.detail = f"max Hajek shift error {worst['hajek']:.1e}, max A-IPW/IPW gap {worst['aipw']:.1e}"
        assert worst["hajek"] <= 1e-12
        assert worst["aipw"] <= 1e-12


@pytest.fixture(scope="session")
def high_positivity_runs():
    """Shared C = 2, n = 1000 study: R = 200 replications plus the true-SE run."""
    config = DgpConfig(C=2, n=1000, seed=0)
    settings = SimulationSettings()
    start = time.perf_counter()
    report = run_replications(config, list(TABLE_METHODS), R_TABLE, settings, jobs=JOBS)
    main_seconds = time.perf_counter() - start
    true_ses = monte_carlo_true_ses(config, list(TABLE_METHODS), R_TRUE_SE, settings, jobs=JOBS)
    return report, true_ses, main_seconds


def test_criterion_5_adaptive_mse_ordering(high_positivity_runs):
    report, _, seconds = high_positivity_runs
    mse = {m: report[m].mse for m in TABLE_METHODS}
    with record(5, "MSE(C-TMLE) < MSE(MV-TMLE) < MSE(CV-TMLE) and ratio C/CV <= 0.5 at C=2, n=1000") as r:
        ratio = mse["c-tmle"] / mse["cv-tmle"]
        r.detail = (
            f"C-TMLE {mse['c-tmle']:.3f}, MV-TMLE {mse['mv-tmle']:.3f}, CV-TMLE {mse['cv-tmle']:.3f}, "
            f"ratio {ratio:.2f}, {seconds:.0f}s on {JOBS} worker(s)"
        )
        assert mse["c-tmle"] < mse["mv-tmle"] < mse["cv-tmle"]
        assert ratio <= 0.5


def test_criterion_6_fixed_gamma_trend():
    config = DgpConfig(C=1, n=200, seed=0)
    methods = ["tmle@0.8", "tmle@1", "ipw@0.9", "ipw@1"]
    start = time.perf_counter()
    report = run_replications(config, methods, 200, SimulationSettings(), jobs=JOBS)
    seconds = time.perf_counter() - start
    mse = {m: report[m].mse for m in methods}
    with record(6, "fixed-gamma MSE: TMLE(0.80) < TMLE(1.00) and IPW(1.00) > IPW(0.90) at C=1, n=200") as r:
        r.detail = (
            f"TMLE {mse['tmle@0.8']:.3f} vs {mse['tmle@1']:.3f}; IPW {mse['ipw@1']:.2f} vs {mse['ipw@0.9']:.2f}; "
            f"{seconds:.0f}s"
        )
        assert mse["tmle@0.8"] < mse["tmle@1"]
        assert mse["ipw@1"] > mse["ipw@0.9"]
        assert seconds < 600


def _sigma(p, R):
    return math.sqrt(p * (1 - p) / R)


def test_criterion_7_coverage_pattern(high_positivity_runs):
    report, true_ses, _ = high_positivity_runs
    R = R_TABLE
    est_cov = {m: report[m].coverage for m in TABLE_METHODS}
    star_cov = {m: starred_coverage(report[m], report.truth, true_ses[m]) for m in TABLE_METHODS}
    with record(7, "coverage: C-TMLE >= CV-TMLE, both < 0.95; starred >= 0.88 (2-sigma bands, R=200)") as r:
        r.detail = (
            "estimated " + ", ".join(f"{m} {est_cov[m]:.3f}" for m in TABLE_METHODS)
            + "; starred " + ", ".join(f"{m} {star_cov[m]:.3f}" for m in TABLE_METHODS)
        )
        band = 2 * math.hypot(_sigma(est_cov["c-tmle"], R), _sigma(est_cov["cv-tmle"], R))
        assert est_cov["c-tmle"] >= est_cov["cv-tmle"] - band
        for m in ("c-tmle", "cv-tmle"):
            assert est_cov[m] - 2 * _sigma(est_cov[m], R) < 0.95
        for m in TABLE_METHODS:
            assert star_cov[m] + 2 * _sigma(star_cov[m], R) >= 0.88


def test_criterion_8_cv_gamma_grows_with_n():
    means = {}
    for n in (200, 1000):
        report = run_replications(DgpConfig(C=1, n=n, seed=0), ["cv-ipw"], 200, SimulationSettings(), jobs=JOBS)
        means[n] = report["cv-ipw"].mean_gamma
    with record(8, "mean CV-selected gamma at n=1000 exceeds n=200 (C=1, R=200)") as r:
        r.detail = f"n=200: {means[200]:.3f}, n=1000: {means[1000]:.3f}"
        assert means[1000] > means[200]


def test_criterion_9_simulate_byte_identical(tmp_path):
    args = ["simulate", "--C", "2", "--n", "200", "--R", "16", "--seed", "7", "--keep-replicates"]
    dirs = {}
    for label, jobs in (("first", 1), ("second", 1), ("parallel", 8)):
        dirs[label] = tmp_path / label
        assert main([*args, "--jobs", str(jobs), "--out", str(dirs[label])]) == 0
    with record(9, "simulate output byte-identical across runs and --jobs 1 vs 8") as r:
        names = sorted(p.name for p in dirs["first"].iterdir())
        r.detail = ", ".join(names)
        assert names == ["simulation.csv", "simulation.json"]
        for name in names:
            ref = (dirs["first"] / name).read_bytes()
            assert (dirs["second"] / name).read_bytes() == ref
            assert (dirs["parallel"] / name).read_bytes() == ref
