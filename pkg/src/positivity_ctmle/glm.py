"""
Parametric nuisance fits.

Logistic regression by IRLS (propensity score), ordinary least squares
(initial outcome regression) and the one-parameter offset logistic solver
used by the targeting step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import linalg, optimize
from scipy.special import expit

from .exceptions import (
    ConvergenceError,
    DegenerateCovariateError,
    ShapeError,
    SingularDesignError,
)

PROB_CLIP: float = 1e-8
DEVIANCE_TOL: float = 1e-8
SCORE_TOL: float = 1e-8
MAX_ITER: int = 100


@dataclass(frozen=True)
class LogisticFit:
    """Result of :func:`fit_logistic`."""

    coefficients: NDArray
    converged: bool
    iterations: int
    final_deviance: float


@dataclass(frozen=True)
class LinearFit:
    """Result of :func:`fit_ols`."""

    coefficients: NDArray

    def predict(self, X: NDArray) -> NDArray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.coefficients.shape[0]:
            raise ShapeError(
                f"design has shape {X.shape}, fit expects {self.coefficients.shape[0]} columns"
            )
        return X @ self.coefficients


def design_matrix(X: NDArray, intercept: bool = True) -> NDArray:
    """Return ``X`` as a float matrix, optionally with a leading column of ones."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise ValueError("design matrix contains non-finite entries")
    if intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
    return X


def _check_xy(X: NDArray, y: NDArray) -> tuple[NDArray, NDArray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ShapeError(f"design must be 2-d, got shape {X.shape}")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ShapeError(f"response length {y.shape} does not match {X.shape[0]} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in design or response")
    return X, y


def _logistic_nll(eta: NDArray, y: NDArray) -> float:
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta))


def fit_logistic(
    X: NDArray,
    y: NDArray,
    ridge: float = 0.0,
    max_iter: int = MAX_ITER,
    tol: float = DEVIANCE_TOL,
) -> LogisticFit:
    """Fit a logistic regression by Newton/IRLS with step-halving.

    Minimises ``-loglik(beta) + ridge / 2 * ||beta||^2``. Every coefficient,
    the intercept included, is penalised.

    Parameters
    ----------
    X : ndarray, shape (n, d)
        Design matrix (include the intercept column yourself).
    y : ndarray, shape (n,)
        Binary response.
    ridge : float
        Non-negative ridge penalty. A tiny value (1e-8) keeps the fit finite
        under separation.

    Raises
    ------
    SingularDesignError
        If ``ridge == 0`` and the weighted normal equations are singular.
    ConvergenceError
        If the penalised deviance has not settled after ``max_iter`` steps.
    """
    X, y = _check_xy(X, y)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    n, d = X.shape
    if ridge == 0 and (n < d or np.linalg.matrix_rank(X) < d):
        raise SingularDesignError(f"design of shape {X.shape} is rank deficient")

    beta = np.zeros(d)
    eta = X @ beta
    objective = _logistic_nll(eta, y)
    eye = np.eye(d)
    for it in range(1, max_iter + 1):
        p = expit(eta)
        w = p * (1.0 - p)
        grad = X.T @ (y - p) - ridge * beta
        hess = (X * w[:, None]).T @ X + ridge * eye
        try:
            step = linalg.cho_solve(linalg.cho_factor(hess), grad)
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularDesignError("weighted normal equations are singular") from exc

        t = 1.0
        for _ in range(50):
            cand = beta + t * step
            cand_eta = X @ cand
            cand_obj = _logistic_nll(cand_eta, y) + 0.5 * ridge * float(cand @ cand)
            if cand_obj <= objective + 0.5 * ridge * float(beta @ beta) or t < 1e-12:
                break
            t *= 0.5
        old_total = objective + 0.5 * ridge * float(beta @ beta)
        beta, eta = cand, cand_eta
        objective = _logistic_nll(eta, y)
        new_total = objective + 0.5 * ridge * float(beta @ beta)
        # R's glm rule on the deviance scale, plus a settled step: under
        # (near) separation the deviance is flat long before beta is
        small_change = 2.0 * abs(old_total - new_total) / (2.0 * abs(new_total) + 0.1) < tol
        small_step = np.max(np.abs(t * step)) <= 1e-6 * (1.0 + np.max(np.abs(beta)))
        if small_change and small_step:
            return LogisticFit(beta, True, it, 2.0 * objective)
    raise ConvergenceError(
        f"IRLS did not converge in {max_iter} iterations", last_iterate=beta, iterations=max_iter
    )


def fit_ols(X: NDArray, y: NDArray) -> LinearFit:
    """Least squares via a Cholesky factorisation of ``X'X``.

    One round of iterative refinement keeps the residuals orthogonal to the
    columns of ``X`` to near machine precision.
    """
    X, y = _check_xy(X, y)
    n, d = X.shape
    if n < d or np.linalg.matrix_rank(X) < d:
        raise SingularDesignError(f"design of shape {X.shape} is rank deficient")
    try:
        factor = linalg.cho_factor(X.T @ X)
    except linalg.LinAlgError as exc:
        raise SingularDesignError("normal equations are singular") from exc
    beta = linalg.cho_solve(factor, X.T @ y)
    beta = beta + linalg.cho_solve(factor, X.T @ (y - X @ beta))
    return LinearFit(beta)


def predict_proba(fit: LogisticFit, X: NDArray) -> NDArray:
    """Fitted probabilities, clamped into ``[1e-8, 1 - 1e-8]``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if fit.coefficients.shape[0] > 1 else X[:, None]
    if X.shape[1] != fit.coefficients.shape[0]:
        raise ShapeError(
            f"design has {X.shape[1]} columns, fit has {fit.coefficients.shape[0]} coefficients"
        )
    return np.clip(expit(X @ fit.coefficients), PROB_CLIP, 1.0 - PROB_CLIP)


# --------------------------------------------------------------------------
# one-dimensional offset logistic regression (quasi-binomial)
# --------------------------------------------------------------------------


def quasi_binomial_nll(eta: NDArray, y: NDArray) -> NDArray:
    """Per-observation ``-(y log p + (1-y) log(1-p))`` with ``p = expit(eta)``."""
    return np.logaddexp(0.0, eta) - y * eta


def _has_finite_root(h: NDArray, y: NDArray) -> bool:
    # The score is strictly decreasing in epsilon; it has no root exactly when
    # every non-zero covariate pushes toward a boundary outcome of its sign.
    pos, neg = h > 0, h < 0
    up = np.all(y[pos] >= 1.0) and np.all(y[neg] <= 0.0)
    down = np.all(y[pos] <= 0.0) and np.all(y[neg] >= 1.0)
    return not (up or down)


def _newton_rows(offset, H, y, max_iter, inner_tol):
    G, n = H.shape
    eps = np.zeros(G)
    eta = offset[None, :] + eps[:, None] * H
    loss = quasi_binomial_nll(eta, y).sum(axis=1)
    done = np.zeros(G, dtype=bool)
    for _ in range(max_iter):
        p = expit(eta)
        score = (H * (y - p)).sum(axis=1)
        done |= np.abs(score) <= inner_tol
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        Ha = H[active]
        info = (Ha * Ha * p[active] * (1.0 - p[active])).sum(axis=1)
        step = np.where(info > 0, score[active] / np.where(info > 0, info, 1.0), 0.0)
        stalled = step == 0.0
        t = np.ones(active.size)
        pending = ~stalled
        new_eps = eps[active].copy()
        new_eta = eta[active].copy()
        new_loss = loss[active].copy()
        for _ in range(60):
            if not pending.any():
                break
            rows = np.flatnonzero(pending)
            trial = eps[active[rows]] + t[rows] * step[rows]
            trial_eta = offset[None, :] + trial[:, None] * Ha[rows]
            trial_loss = quasi_binomial_nll(trial_eta, y).sum(axis=1)
            slack = 1e-14 * (1.0 + np.abs(loss[active[rows]]))
            ok = trial_loss <= loss[active[rows]] + slack
            acc = rows[ok]
            new_eps[acc] = trial[ok]
            new_eta[acc] = trial_eta[ok]
            new_loss[acc] = trial_loss[ok]
            pending[acc] = False
            t[rows[~ok]] *= 0.5
        stalled |= pending
        tiny = np.abs(new_eps - eps[active]) <= 1e-15 * (1.0 + np.abs(eps[active]))
        eps[active] = new_eps
        eta[active] = new_eta
        loss[active] = new_loss
        done[active[stalled | tiny]] = True
    p = expit(eta)
    score = (H * (y - p)).sum(axis=1)
    return eps, score


def _bracket_solve(offset, h, y, start):
    def score(e):
        return float(np.sum(h * (y - expit(offset + e * h))))

    s0 = score(start)
    if s0 == 0.0:
        return start
    direction = 1.0 if s0 > 0 else -1.0
    width = max(abs(start), 1.0 / float(np.max(np.abs(h))))
    lo = start
    for _ in range(200):
        hi = start + direction * width
        if np.sign(score(hi)) != np.sign(s0):
            a, b = sorted((lo, hi))
            return optimize.brentq(score, a, b, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
        lo = hi
        width *= 2.0
    raise ConvergenceError("could not bracket the score root", last_iterate=start)


def fit_offset_logistic_batch(
    offset: NDArray,
    H: NDArray,
    y: NDArray,
    max_iter: int = MAX_ITER,
    tol: float = SCORE_TOL,
) -> NDArray:
    """Solve the fluctuation score equation for several covariates at once.

    Row ``g`` of ``H`` is a candidate covariate sharing the common ``offset``;
    returns the vector of fitted coefficients, one per row. Each row satisfies
    ``|sum_i H_gi (y_i - expit(offset_i + eps_g H_gi))| <= tol * n``.
    """
    offset = np.asarray(offset, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    y = np.asarray(y, dtype=float)
    n = offset.shape[0]
    if H.shape[1] != n or y.shape[0] != n:
        raise ShapeError("offset, covariate and outcome lengths differ")
    if not np.all(np.isfinite(offset)) or not np.all(np.isfinite(H)):
        raise ValueError("offset and covariate must be finite")
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("outcome must lie in [0, 1]")
    for g in range(H.shape[0]):
        if not np.any(H[g]):
            raise DegenerateCovariateError("fluctuation covariate is identically zero")
        if not _has_finite_root(H[g], y):
            raise ConvergenceError("score equation has no finite root (separated data)", last_iterate=np.inf)

    eps, score = _newton_rows(offset, H, y, max_iter, inner_tol=1e-3 * tol * n)
    bad = np.flatnonzero(np.abs(score) > tol * n)
    for g in bad:
        e = _bracket_solve(offset, H[g], y, eps[g])
        s = float(np.sum(H[g] * (y - expit(offset + e * H[g]))))
        if abs(s) > tol * n:
            raise ConvergenceError(
                f"fluctuation score {s:.3e} above tolerance", last_iterate=e, iterations=max_iter
            )
        eps[g] = e
    return eps


def fit_offset_logistic(
    offset: NDArray,
    h: NDArray,
    y: NDArray,
    max_iter: int = MAX_ITER,
    tol: float = SCORE_TOL,
) -> float:
    """Logistic regression of ``y`` on a single covariate ``h`` with a fixed offset.

    ``y`` may be fractional (quasi-binomial). Damped Newton from ``eps = 0``,
    so the empirical loss never exceeds its value at zero; a bracketing root
    search takes over if Newton stalls.

    Raises
    ------
    DegenerateCovariateError
        If ``h`` is identically zero.
    ConvergenceError
        If the score equation has no finite root or cannot be solved to
        ``tol * n``.
    """
    return float(fit_offset_logistic_batch(offset, np.asarray(h, dtype=float)[None, :], y, max_iter, tol)[0])
