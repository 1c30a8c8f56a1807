"""
Monte Carlo study of truncated and adaptively truncated ATE estimators.

Data-generating process: 20 exchangeably correlated normal covariates, a
logistic treatment model whose intercept ``C`` pushes propensity scores
toward one, and a Gaussian outcome with a constant treatment effect of 2.

Every replication draws from its own RNG stream keyed by ``(seed,
replication)``, so results do not depend on scheduling or worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .estimators import (
    AteEstimate,
    Dataset,
    aipw_estimate,
    hajek_estimate,
    initial_outcome_fit,
    ipw_estimate,
)
from .exceptions import EstimationError
from .selectors import (
    DEFAULT_K_REPEATS,
    DEFAULT_V,
    PS_RIDGE,
    ctmle_select,
    cv_select_gamma,
    fit_propensity,
    mv_select_gamma,
    tmle_over_grid,
)
from .truncation import TruncationGrid, make_grid, truncate_upper

ESTIMATORS = ("ipw", "hajek", "aipw", "tmle")
ADAPTIVE = ("cv-ipw", "cv-hajek", "cv-aipw", "cv-tmle", "mv-tmle", "c-tmle")
TABLE_METHODS = ("cv-tmle", "mv-tmle", "c-tmle")
TRUE_SE_SEED_OFFSET = 7_919_000
FAILURE_THRESHOLD = 0.05

Method = Union[str, Callable[[Dataset], AteEstimate]]


class SimulationError(EstimationError):
    """Too many replications failed; the partial report is attached."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class DgpConfig:
    C: float = 0.0
    n: int = 1000
    p: int = 20
    rho: float = 0.1
    seed: int = 0
    sum_from: int = 3
    effect: float = 2.0

    def __post_init__(self):
        if self.n < 30:
            raise ValueError("n must be at least 30")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.p != 20:
            raise ValueError("the design uses exactly 20 covariates")
        if self.sum_from not in (2, 3):
            raise ValueError("sum_from must be 2 or 3")


@dataclass(frozen=True)
class SimulationSettings:
    """Estimator-side settings shared by every replication."""

    gamma_min: float = 0.60
    gamma_max: float = 1.00
    step: float = 0.01
    V: int = DEFAULT_V
    k_repeats: int = DEFAULT_K_REPEATS
    level: float = 0.95
    # W3..W10, zero-based
    outcome_columns: tuple[int, ...] = tuple(range(2, 10))

    @property
    def grid(self) -> TruncationGrid:
        if self.gamma_min >= self.gamma_max:
            return TruncationGrid.from_values([self.gamma_max])
        return make_grid(self.gamma_min, self.gamma_max, self.step)


# --------------------------------------------------------------------------
# data-generating process
# --------------------------------------------------------------------------


def covariance(p: int, rho: float) -> NDArray:
    return np.full((p, p), rho) + (1.0 - rho) * np.eye(p)


def treatment_linear_predictor(config: DgpConfig, W: NDArray) -> NDArray:
    rest = W[:, config.sum_from - 1 :].sum(axis=1)
    return W[:, 0] + W[:, 1] + 0.15 * rest + config.C


def true_propensity(config: DgpConfig, W: NDArray) -> NDArray:
    return expit(treatment_linear_predictor(config, W))


def outcome_mean(config: DgpConfig, A: NDArray, W: NDArray) -> NDArray:
    return 2.0 + 2.0 * W[:, [0, 1, 4, 5, 7]].sum(axis=1) + config.effect * A


def sample_dataset(config: DgpConfig, replication: int) -> Dataset:
    """Draw one dataset; identical for identical ``(config, replication)``."""
    rng = np.random.default_rng([config.seed, replication])
    L = np.linalg.cholesky(covariance(config.p, config.rho))
    W = rng.standard_normal((config.n, config.p)) @ L.T
    A = (rng.random(config.n) < true_propensity(config, W)).astype(float)
    Y = outcome_mean(config, A, W) + rng.standard_normal(config.n)
    return Dataset(Y, A, W)


def true_ate(config: DgpConfig) -> float:
    """E(Y1) - E(Y0); the treatment coefficient of the outcome model (2 by default)."""
    return float(config.effect)


# --------------------------------------------------------------------------
# method evaluation
# --------------------------------------------------------------------------


def method_name(method: Method) -> str:
    return method if isinstance(method, str) else getattr(method, "__name__", repr(method))


def fixed_method(estimator: str, gamma: float) -> str:
    return f"{estimator}@{gamma:g}"


def parse_method(name: str) -> tuple[str, str, Optional[float]]:
    """Split a method label into ``(selector, estimator, gamma)``.

    ``"tmle@0.8"`` -> ``("fixed", "tmle", 0.8)``; ``"cv-aipw"`` ->
    ``("cv", "aipw", None)``; a bare estimator means no truncation.
    """
    if name == "c-tmle":
        return "ctmle", "tmle", None
    if name == "mv-tmle":
        return "mv", "tmle", None
    if name.startswith("cv-") and name[3:] in ESTIMATORS:
        return "cv", name[3:], None
    if "@" in name:
        est, _, g = name.partition("@")
        if est in ESTIMATORS:
            gamma = float(g)
            if not 0 < gamma <= 1:
                raise ValueError(f"truncation level out of range in {name!r}")
            return "fixed", est, gamma
    if name in ESTIMATORS:
        return "fixed", name, 1.0
    raise ValueError(f"unknown method {name!r}")


def fit_nuisances(data: Dataset, outcome_columns=None):
    """Propensity scores (unpenalised, falling back to a tiny ridge) and the initial outcome fit."""
    try:
        (ps,) = fit_propensity(data.W, data.A, data.W, ridge=0.0)
    except EstimationError:
        (ps,) = fit_propensity(data.W, data.A, data.W, ridge=PS_RIDGE)
    q0 = initial_outcome_fit(data, outcome_columns)
    return ps, q0


def _apply(estimator: str, data: Dataset, ps: NDArray, q0, gamma: float, level: float) -> AteEstimate:
    ps_g = truncate_upper(ps, gamma)
    if estimator == "ipw":
        est = ipw_estimate(data, ps_g, gamma, level)
    elif estimator == "hajek":
        est = hajek_estimate(data, ps_g, gamma, level)
    elif estimator == "aipw":
        est = aipw_estimate(data, ps_g, q0, gamma, level)
    else:
        est = tmle_over_grid(data, ps, q0, [gamma], level)[0]
    return est


def evaluate_methods(
    data: Dataset,
    methods: Sequence[Method],
    settings: SimulationSettings = SimulationSettings(),
    seed: int = 0,
) -> dict[str, Union[AteEstimate, Exception]]:
    """Run every method on one dataset. Failures are returned in place of estimates."""
    grid = settings.grid
    level = settings.level
    out: dict = {}
    cache: dict = {}

    def nuisances():
        if "nuisance" not in cache:
            cache["nuisance"] = fit_nuisances(data, settings.outcome_columns)
        return cache["nuisance"]

    def selected(kind: str) -> float:
        if kind not in cache:
            if kind == "cv":
                cache[kind] = cv_select_gamma(data, grid, settings.V, seed)
            else:
                ps, q0 = nuisances()
                cache[kind] = mv_select_gamma(data, grid, settings.k_repeats, seed + 1, q0=q0, ps=ps)
        return cache[kind]

    parsed = {}
    for m in methods:
        if isinstance(m, str):
            parsed[m] = parse_method(m)
    # fixed-level TMLEs share one batched fluctuation
    tmle_levels = sorted({g for sel, est, g in parsed.values() if sel == "fixed" and est == "tmle"})
    tmle_fixed = {}
    if tmle_levels:
        try:
            ps, q0 = nuisances()
            tmle_fixed = {e.gamma: e for e in tmle_over_grid(data, ps, q0, tmle_levels, level)}
        except (EstimationError, ValueError) as exc:
            tmle_fixed = {g: exc for g in tmle_levels}

    for m in methods:
        name = method_name(m)
        try:
            if not isinstance(m, str):
                est = m(data)
            else:
                sel, estimator, gamma = parsed[m]
                if sel == "fixed" and estimator == "tmle":
                    est = tmle_fixed[gamma]
                    if isinstance(est, Exception):
                        raise est
                elif sel == "fixed":
                    est = _apply(estimator, data, *nuisances(), gamma, level)
                elif sel == "ctmle":
                    ps, q0 = nuisances()
                    est, _, _ = ctmle_select(q0, data, grid, settings.V, seed + 2, ps=ps, level=level)
                else:
                    est = _apply(estimator, data, *nuisances(), selected(sel), level)
            est.method = name
            out[name] = est
        except (EstimationError, ValueError, FloatingPointError) as exc:
            out[name] = exc
    return out


def _selector_seed(seed: int, replication: int) -> int:
    return int(np.random.SeedSequence([seed, replication, 1]).generate_state(1)[0])


def _replicate(replication: int, config: DgpConfig, methods, settings: SimulationSettings):
    data = sample_dataset(config, replication)
    results = evaluate_methods(data, methods, settings, _selector_seed(config.seed, replication))
    packed = {}
    for name, est in results.items():
        if isinstance(est, Exception):
            packed[name] = f"{type(est).__name__}: {est}"
        else:
            packed[name] = (est.psi, est.se, est.ci_lower, est.ci_upper, est.gamma)
    return packed


def _run(config: DgpConfig, methods, R: int, settings, jobs: int, start: int = 0) -> list[dict]:
    work = partial(_replicate, config=config, methods=list(methods), settings=settings)
    reps = range(start, start + R)
    if jobs <= 1:
        return [work(r) for r in reps]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, reps, chunksize=max(1, R // (4 * jobs))))


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


@dataclass
class MethodSummary:
    method: str
    bias: float
    se: float
    mse: float
    coverage: float
    mean_gamma: Optional[float]
    mean_est_se: float
    replications: int
    failures: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    est_se: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    covered: list = field(default_factory=list)


@dataclass
class SimulationReport:
    config: DgpConfig
    settings: SimulationSettings
    R: int
    truth: float
    methods: dict

    def __getitem__(self, method: str) -> MethodSummary:
        return self.methods[method]

    def rows(self) -> list[dict]:
        return [
            {
                "method": s.method,
                "bias": s.bias,
                "se": s.se,
                "mse": s.mse,
                "coverage": s.coverage,
                "mean_gamma": s.mean_gamma,
                "mean_est_se": s.mean_est_se,
                "replications": s.replications,
                "failures": len(s.failures),
            }
            for s in self.methods.values()
        ]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())

    def to_json(self, keep_replicates: bool = False) -> str:
        doc = {
            "schema_version": 1,
            "config": asdict(self.config),
            "settings": asdict(self.settings),
            "R": self.R,
            "truth": self.truth,
            "methods": {},
        }
        for s in self.methods.values():
            rec = {k: v for k, v in asdict(s).items() if k not in ("psi", "est_se", "gamma", "covered", "failures")}
            rec["failures"] = [list(f) for f in s.failures]
            if keep_replicates:
                rec["replicates"] = {"psi": s.psi, "se": s.est_se, "gamma": s.gamma, "covered": s.covered}
            doc["methods"][s.method] = rec
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def summarize(name: str, records: list, truth: float, start: int = 0) -> MethodSummary:
    psi, ses, gammas, covered, failures = [], [], [], [], []
    for i, rec in enumerate(records):
        r = rec[name]
        if isinstance(r, str):
            failures.append((start + i, r))
            continue
        p, s, lo, hi, g = r
        psi.append(p)
        ses.append(s)
        gammas.append(g)
        covered.append(bool(lo <= truth <= hi))
    arr = np.asarray(psi, dtype=float)
    k = arr.size
    if k:
        bias = float(np.mean(arr) - truth)
        sd = float(np.std(arr, ddof=1)) if k > 1 else math.nan
        mse = float(np.mean((arr - truth) ** 2))
        cov = float(np.mean(covered))
        mean_se = float(np.mean(ses))
    else:
        bias = sd = mse = cov = mean_se = math.nan
    g = [x for x in gammas if x is not None]
    mean_gamma = float(np.mean(g)) if g else None
    return MethodSummary(name, bias, sd, mse, cov, mean_gamma, mean_se, k, failures, psi, ses, gammas, covered)


def run_replications(
    config: DgpConfig,
    methods: Sequence[Method],
    R: int,
    settings: SimulationSettings = SimulationSettings(),
    jobs: int = 1,
    start: int = 0,
) -> SimulationReport:
    """Simulate ``R`` datasets and summarise every method.

    Bias is ``mean(psi) - truth``, ``se`` the sample SD (divide by R - 1),
    ``mse`` the mean squared error and ``coverage`` the share of intervals
    containing the truth.

    Raises
    ------
    SimulationError
        If more than 5% of replications fail for any method.
    """
    if R < 2:
        raise ValueError("need at least two replications")
    records = _run(config, methods, R, settings, jobs, start)
    truth = true_ate(config)
    summaries = {method_name(m): summarize(method_name(m), records, truth, start) for m in methods}
    report = SimulationReport(config, settings, R, truth, summaries)
    worst = max((len(s.failures) for s in summaries.values()), default=0)
    if worst > FAILURE_THRESHOLD * R:
        raise SimulationError(f"{worst} of {R} replications failed", report)
    return report


def monte_carlo_true_ses(
    config: DgpConfig,
    methods: Sequence[Method],
    R_large: int,
    settings: SimulationSettings = SimulationSettings(),
    jobs: int = 1,
) -> dict[str, float]:
    """Sampling SD of each method's estimate from an independent simulation."""
    if R_large < 1000:
        raise ValueError("true-SE simulation needs R_large >= 1000")
    return _true_ses(config, methods, R_large, settings, jobs)


def _true_ses(config, methods, R, settings, jobs) -> dict[str, float]:
    shifted = replace(config, seed=config.seed + TRUE_SE_SEED_OFFSET)
    report = run_replications(shifted, methods, R, settings, jobs)
    return {name: s.se for name, s in report.methods.items()}


def monte_carlo_true_se(
    config: DgpConfig,
    method: Method,
    R_large: int,
    settings: SimulationSettings = SimulationSettings(),
    jobs: int = 1,
) -> float:
    """Sampling SD of one method's estimate over ``R_large`` fresh replications."""
    return monte_carlo_true_ses(config, [method], R_large, settings, jobs)[method_name(method)]


def starred_coverage(summary: MethodSummary, truth: float, true_se: float, z: float = 1.96) -> float:
    """Coverage of ``psi +/- z * true_se`` over the replications in ``summary``."""
    psi = np.asarray(summary.psi, dtype=float)
    return float(np.mean(np.abs(psi - truth) <= z * true_se))


TABLE_LABELS = {"cv-tmle": "CV-TMLE", "mv-tmle": "MV-TMLE", "c-tmle": "C-TMLE"}


def coverage_table(report: SimulationReport, true_ses: dict[str, float]) -> list[dict]:
    """Rows of starred (true-SE) and estimated-SE coverage per adaptive TMLE."""
    rows = []
    for name, se in true_ses.items():
        s = report[name]
        rows.append({
            "method": TABLE_LABELS.get(name, name) + "*",
            "se_type": "true",
            "coverage": starred_coverage(s, report.truth, se),
            "mean_ci_width": 2 * 1.96 * se,
        })
    for name in true_ses:
        s = report[name]
        rows.append({
            "method": TABLE_LABELS.get(name, name),
            "se_type": "estimated",
            "coverage": s.coverage,
            "mean_ci_width": 2 * 1.96 * s.mean_est_se,
        })
    return rows


# --------------------------------------------------------------------------
# fixed-level sweep
# --------------------------------------------------------------------------


def run_sweep(
    config: DgpConfig,
    estimators: Sequence[str] = ESTIMATORS,
    R: int = 200,
    settings: SimulationSettings = SimulationSettings(),
    jobs: int = 1,
) -> list[dict]:
    """Bias/SE/MSE of every estimator at every fixed truncation level."""
    gammas = settings.grid.gammas
    methods = [fixed_method(e, g) for e in estimators for g in gammas]
    report = run_replications(config, methods, R, settings, jobs)
    rows = []
    for e in estimators:
        for g in gammas:
            s = report[fixed_method(e, g)]
            rows.append({"estimator": e, "gamma": g, "bias": s.bias, "se": s.se, "mse": s.mse, "R": s.replications})
    return rows
