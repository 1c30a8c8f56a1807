"""
Data-adaptive choice of the truncation level.

Three selectors:

* ``cv_select_gamma``  - V-fold cross-validated treatment log-loss of the
  truncated propensity fit (ignores the target parameter).
* ``mv_select_gamma``  - estimated MSE of the TMLE: influence-curve variance
  plus a squared bias from repeated half-sample splits.
* ``ctmle_select``     - collaborative TMLE: a staged sequence of targeted
  outcome fits, each stage fluctuating the previous stage's winner, with the
  stopping point chosen by cross-validated outcome loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .estimators import (
    AteEstimate,
    Dataset,
    OutcomeFit,
    clever_covariate,
    empirical_loss,
    fluctuate,
    initial_outcome_fit,
    targeted_estimate,
)
from .exceptions import EstimationError, InsufficientDataError
from .glm import design_matrix, fit_logistic, fit_offset_logistic_batch, predict_proba, quasi_binomial_nll
from .truncation import TruncationGrid, grid_quantiles

PS_RIDGE: float = 1e-8
DEFAULT_V: int = 5
DEFAULT_K_REPEATS: int = 10


class FoldError(EstimationError):
    """A cross-validation fold failed; ``fold`` holds its index."""

    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass(frozen=True)
class FoldAssignment:
    labels: NDArray
    V: int
    seed: int

    def split(self, v: int) -> tuple[NDArray, NDArray]:
        """(training indices, validation indices) for fold ``v``."""
        return np.flatnonzero(self.labels != v), np.flatnonzero(self.labels == v)


@dataclass(frozen=True)
class TmleCandidate:
    gamma: float
    stage: int
    q_star: OutcomeFit
    empirical_L1: float
    ps_truncated: NDArray
    caps: tuple[float, ...]
    stage_initial: OutcomeFit


@dataclass(frozen=True)
class CandidateSequence:
    candidates: dict
    stage_points: tuple[float, ...]

    def __getitem__(self, gamma: float) -> TmleCandidate:
        return self.candidates[gamma]


def make_folds(n: int, V: int, seed: int) -> FoldAssignment:
    """Balanced random fold labels; sizes differ by at most one."""
    if V < 2 or n < V:
        raise InsufficientDataError(f"cannot split {n} observations into {V} folds")
    rng = np.random.default_rng(seed)
    labels = np.empty(n, dtype=int)
    labels[rng.permutation(n)] = np.arange(n) % V
    return FoldAssignment(labels, V, seed)


def argmin_prefer_larger(values) -> int:
    """Index of the minimum; ties go to the last (largest-gamma) position."""
    values = np.asarray(values, dtype=float)
    return int(np.flatnonzero(values == np.min(values))[-1])


def fit_propensity(W_train: NDArray, A_train: NDArray, *W_eval: NDArray, ridge: float = PS_RIDGE):
    """Main-terms logistic propensity fit; returns predictions for each ``W_eval``."""
    fit = fit_logistic(design_matrix(W_train), A_train, ridge=ridge)
    return tuple(predict_proba(fit, design_matrix(W)) for W in W_eval)


def _truncated_ps(ps: NDArray, caps: NDArray) -> NDArray:
    return np.minimum(ps[None, :], caps[:, None])


def tmle_over_grid(
    data: Dataset, ps: NDArray, q0: OutcomeFit, gammas, level: float = 0.95, method: str = "tmle"
) -> list[AteEstimate]:
    """Fixed-truncation TMLE at every level in ``gammas`` (one batched fluctuation)."""
    gammas = np.asarray(list(gammas), dtype=float)
    caps = grid_quantiles(ps, gammas)
    ps_g = _truncated_ps(ps, caps)
    H = clever_covariate(data.A[None, :], ps_g)
    y_s = q0.scaling.transform(data.Y)
    eps = fit_offset_logistic_batch(q0.eta_aw, H, y_s)
    out = []
    for g, gamma in enumerate(gammas):
        q_star = fluctuate(q0, data.A, y_s, ps_g[g], epsilon=eps[g])
        out.append(
            targeted_estimate(data, ps_g[g], q_star, method, float(gamma), level, empirical_loss=empirical_loss(q_star, y_s))
        )
    return out


# --------------------------------------------------------------------------
# CV selector
# --------------------------------------------------------------------------


def cv_gamma_losses(data: Dataset, grid: TruncationGrid, V: int = DEFAULT_V, seed: int = 0, ridge: float = PS_RIDGE) -> NDArray:
    """Fold-averaged validation log-loss of the truncated propensity fit at each gamma."""
    if data.n < 2 * V:
        raise InsufficientDataError(f"need n >= 2V, got n={data.n}, V={V}")
    folds = make_folds(data.n, V, seed)
    gammas = grid.values
    total = np.zeros(gammas.size)
    for v in range(V):
        tr, va = folds.split(v)
        try:
            ps_tr, ps_va = fit_propensity(data.W[tr], data.A[tr], data.W[tr], data.W[va], ridge=ridge)
        except EstimationError as exc:
            raise FoldError(v, exc) from exc
        caps = grid_quantiles(ps_tr, gammas)
        g = _truncated_ps(ps_va, caps)
        a = data.A[va][None, :]
        total += np.mean(-(a * np.log(g) + (1.0 - a) * np.log1p(-g)), axis=1)
    return total / V


def cv_select_gamma(data: Dataset, grid: TruncationGrid, V: int = DEFAULT_V, seed: int = 0, ridge: float = PS_RIDGE) -> float:
    """Truncation level minimising the cross-validated treatment log-loss."""
    if len(grid) == 1:
        return grid.gammas[0]
    losses = cv_gamma_losses(data, grid, V, seed, ridge)
    return grid.gammas[argmin_prefer_larger(losses)]


# --------------------------------------------------------------------------
# MV selector
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MvRisk:
    variance: NDArray
    bias2: NDArray
    splits_used: int
    splits_failed: int

    @property
    def mse(self) -> NDArray:
        return self.variance + self.bias2


def mv_risk(
    data: Dataset,
    grid: TruncationGrid,
    k_repeats: int = DEFAULT_K_REPEATS,
    seed: int = 0,
    q0: Optional[OutcomeFit] = None,
    ps: Optional[NDArray] = None,
    ridge: float = PS_RIDGE,
) -> MvRisk:
    """Variance and split-sample squared bias of the truncated TMLE over the grid.

    The reference estimate on the complementary half is the untruncated TMLE.
    Propensity scores are refitted inside each half; ``q0`` (the full-data
    initial outcome fit) is reused.
    """
    if data.n < 4:
        raise InsufficientDataError("MV selector needs at least 4 observations")
    if k_repeats < 1:
        raise ValueError("k_repeats must be at least 1")
    if q0 is None:
        q0 = initial_outcome_fit(data)
    if ps is None:
        (ps,) = fit_propensity(data.W, data.A, data.W, ridge=ridge)
    gammas = grid.values
    variance = np.array([e.se**2 for e in tmle_over_grid(data, ps, q0, gammas)])

    rng = np.random.default_rng(seed)
    half = data.n // 2
    bias2 = np.zeros(gammas.size)
    used = failed = 0
    for _ in range(k_repeats):
        perm = rng.permutation(data.n)
        first, second = np.sort(perm[:half]), np.sort(perm[half:])
        try:
            d1, d2 = data.subset(first), data.subset(second)
            (ps1,) = fit_propensity(d1.W, d1.A, d1.W, ridge=ridge)
            (ps2,) = fit_propensity(d2.W, d2.A, d2.W, ridge=ridge)
            psi1 = np.array([e.psi for e in tmle_over_grid(d1, ps1, q0.subset(first), gammas)])
            ref = tmle_over_grid(d2, ps2, q0.subset(second), [1.0])[0].psi
        except EstimationError:
            failed += 1
            continue
        bias2 += (psi1 - ref) ** 2
        used += 1
    if used == 0:
        raise EstimationError(f"all {k_repeats} MV splits failed")
    return MvRisk(variance, bias2 / used, used, failed)


def mv_select_gamma(
    data: Dataset,
    grid: TruncationGrid,
    k_repeats: int = DEFAULT_K_REPEATS,
    seed: int = 0,
    q0: Optional[OutcomeFit] = None,
    ps: Optional[NDArray] = None,
    ridge: float = PS_RIDGE,
) -> float:
    """Truncation level minimising ``Var(gamma) + Bias^2(gamma)``."""
    if len(grid) == 1:
        return grid.gammas[0]
    risk = mv_risk(data, grid, k_repeats, seed, q0, ps, ridge)
    return grid.gammas[argmin_prefer_larger(risk.mse)]


# --------------------------------------------------------------------------
# collaborative TMLE
# --------------------------------------------------------------------------


def _build_candidates(
    q0: OutcomeFit,
    A: NDArray,
    y_s: NDArray,
    ps: NDArray,
    gammas: NDArray,
    stage_points: Optional[Sequence[float]] = None,
) -> CandidateSequence:
    G = gammas.size
    caps = grid_quantiles(ps, gammas)
    ps_g = _truncated_ps(ps, caps)
    H = clever_covariate(A[None, :], ps_g)
    search = stage_points is None
    if not search:
        index = {round(float(g), 12): i for i, g in enumerate(gammas)}
        try:
            replay = [index[round(float(p), 12)] for p in stage_points]
        except KeyError as exc:
            raise ValueError(f"stage point {exc.args[0]} is not on the grid") from None
        if any(b <= a for a, b in zip(replay, replay[1:])):
            raise ValueError("stage points must be strictly increasing")

    candidates: dict = {}
    points: list[float] = []
    current, cap_path = q0, ()
    lo, stage = 0, 1
    while lo < G:
        if search:
            eps = fit_offset_logistic_batch(current.eta_aw, H[lo:], y_s)
            eta = current.eta_aw[None, :] + eps[:, None] * H[lo:]
            losses = quasi_binomial_nll(eta, y_s).mean(axis=1)
            k = lo + argmin_prefer_larger(losses)
            eps = eps[: k - lo + 1]
        else:
            if stage > len(replay):
                raise ValueError("stage points end before the top of the grid")
            k = replay[stage - 1]
            if k < lo:
                raise ValueError("stage point lies below the current stage boundary")
            eps = fit_offset_logistic_batch(current.eta_aw, H[lo : k + 1], y_s)
        for j, g in enumerate(range(lo, k + 1)):
            q_star = fluctuate(current, A, y_s, ps_g[g], epsilon=eps[j])
            candidates[float(gammas[g])] = TmleCandidate(
                gamma=float(gammas[g]),
                stage=stage,
                q_star=q_star,
                empirical_L1=empirical_loss(q_star, y_s),
                ps_truncated=ps_g[g],
                caps=cap_path + (float(caps[g]),),
                stage_initial=current,
            )
        chosen = candidates[float(gammas[k])]
        current, cap_path = chosen.q_star, chosen.caps
        points.append(float(gammas[k]))
        lo, stage = k + 1, stage + 1
    return CandidateSequence(candidates, tuple(points))


def generate_candidates(
    q0: OutcomeFit,
    data: Dataset,
    grid: TruncationGrid,
    stage_points: Optional[Sequence[float]] = None,
    ps: Optional[NDArray] = None,
    ridge: float = PS_RIDGE,
) -> CandidateSequence:
    """Staged construction of targeted outcome fits, one per grid level.

    Stage ``k`` fluctuates the previous stage's selected fit with every
    remaining truncation level and keeps the level with the lowest empirical
    loss (search mode), or takes the level from ``stage_points`` (replay
    mode). Levels between the previous stage point and the new one are
    recorded as candidates of stage ``k``.

    Parameters
    ----------
    q0 : OutcomeFit
        Initial outcome fit on the scaled outcome, aligned with ``data``.
    stage_points : sequence of float, optional
        Fluctuation points to replay instead of searching.
    ps : ndarray, optional
        Untruncated propensity scores for ``data``; fitted by main-terms
        logistic regression when omitted.
    """
    if ps is None:
        (ps,) = fit_propensity(data.W, data.A, data.W, ridge=ridge)
    y_s = q0.scaling.transform(data.Y)
    return _build_candidates(q0, data.A, y_s, np.asarray(ps, dtype=float), grid.values, stage_points)


def _path_eta(q0_eta_aw: NDArray, A: NDArray, ps: NDArray, caps, epsilons) -> NDArray:
    eta = q0_eta_aw.copy()
    for cap, eps in zip(caps, epsilons):
        eta += eps * clever_covariate(A, np.minimum(ps, cap))
    return eta


def ctmle_cv_losses(
    q0: OutcomeFit,
    data: Dataset,
    grid: TruncationGrid,
    stage_points: Sequence[float],
    V: int = DEFAULT_V,
    seed: int = 0,
    ridge: float = PS_RIDGE,
) -> NDArray:
    """V-fold validation outcome loss of every candidate, replaying ``stage_points``."""
    folds = make_folds(data.n, V, seed)
    y_s = q0.scaling.transform(data.Y)
    gammas = grid.values
    total = np.zeros(gammas.size)
    for v in range(V):
        tr, va = folds.split(v)
        try:
            ps_tr, ps_va = fit_propensity(data.W[tr], data.A[tr], data.W[tr], data.W[va], ridge=ridge)
            seq = _build_candidates(q0.subset(tr), data.A[tr], y_s[tr], ps_tr, gammas, stage_points)
        except EstimationError as exc:
            raise FoldError(v, exc) from exc
        eta0, a_va = q0.eta_aw[va], data.A[va]
        for g, gamma in enumerate(gammas):
            cand = seq[float(gamma)]
            eta = _path_eta(eta0, a_va, ps_va, cand.caps, cand.q_star.epsilons)
            total[g] += float(np.mean(quasi_binomial_nll(eta, y_s[va])))
    return total / V


def ctmle_select(
    q0: OutcomeFit,
    data: Dataset,
    grid: TruncationGrid,
    V: int = DEFAULT_V,
    seed: int = 0,
    ps: Optional[NDArray] = None,
    ridge: float = PS_RIDGE,
    level: float = 0.95,
) -> tuple[AteEstimate, float, OutcomeFit]:
    """Collaborative TMLE with data-adaptive truncation.

    Returns the estimate, the cross-validated truncation level and the final
    targeted outcome fit. The final fit re-targets the selected candidate's
    stage-initial fit with every level at or below the selected one and keeps
    the one with smallest empirical loss; its truncated propensity score is
    used for the influence-curve standard error.
    """
    if V < 2 or data.n < 2 * V:
        raise InsufficientDataError(f"need V >= 2 and n >= 2V, got n={data.n}, V={V}")
    if ps is None:
        (ps,) = fit_propensity(data.W, data.A, data.W, ridge=ridge)
    ps = np.asarray(ps, dtype=float)
    y_s = q0.scaling.transform(data.Y)
    gammas = grid.values
    full = _build_candidates(q0, data.A, y_s, ps, gammas)

    if len(grid) == 1:
        cv = np.zeros(1)
    else:
        cv = ctmle_cv_losses(q0, data, grid, full.stage_points, V, seed, ridge)
    sel = argmin_prefer_larger(cv)
    gamma_cv = float(gammas[sel])
    chosen = full[gamma_cv]
    initial = chosen.stage_initial

    caps = grid_quantiles(ps, gammas[: sel + 1])
    ps_g = _truncated_ps(ps, caps)
    H = clever_covariate(data.A[None, :], ps_g)
    eps = fit_offset_logistic_batch(initial.eta_aw, H, y_s)
    losses = quasi_binomial_nll(initial.eta_aw[None, :] + eps[:, None] * H, y_s).mean(axis=1)
    best = argmin_prefer_larger(losses)
    q_final = fluctuate(initial, data.A, y_s, ps_g[best], epsilon=eps[best])

    est = targeted_estimate(
        data,
        ps_g[best],
        q_final,
        "c-tmle",
        gamma_cv,
        level,
        retarget_gamma=float(gammas[best]),
        cv_loss=float(cv[sel]),
        stages=float(len(full.stage_points)),
        stage=float(chosen.stage),
        empirical_loss=empirical_loss(q_final, y_s),
    )
    return est, gamma_cv, q_final
