"""
Average treatment effect estimators built on a propensity score vector.

IPW (Horvitz-Thompson), Hajek-normalised IPW, augmented IPW and TMLE with a
logistic fluctuation on a [0, 1]-scaled outcome. Standard errors come from the
empirical variance of the influence curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit
from scipy.stats import norm

from .exceptions import (
    DegenerateOutcomeError,
    EmptyArmError,
    InsufficientDataError,
    ShapeError,
)
from .glm import design_matrix, fit_offset_logistic, fit_ols, quasi_binomial_nll

Q_CLIP: float = 1e-6


@dataclass(frozen=True)
class Dataset:
    """Observed data ``(Y, A, W)``."""

    Y: NDArray
    A: NDArray
    W: NDArray

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        A = np.asarray(self.A, dtype=float)
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        if Y.ndim != 1 or A.shape != Y.shape or W.shape[0] != Y.shape[0]:
            raise ShapeError(f"inconsistent shapes Y{Y.shape} A{A.shape} W{W.shape}")
        if not np.all((A == 0) | (A == 1)):
            raise ValueError("treatment must be binary 0/1")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(W))):
            raise ValueError("non-finite values in dataset")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "W", W)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.Y[idx], self.A[idx], self.W[idx])


@dataclass(frozen=True)
class OutcomeScaling:
    """Affine map of the outcome onto [0, 1]."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.upper > self.lower:
            raise DegenerateOutcomeError("scaling needs upper > lower")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def transform(self, y: NDArray) -> NDArray:
        return (np.asarray(y, dtype=float) - self.lower) / self.width

    def inverse(self, s: NDArray) -> NDArray:
        return self.lower + self.width * np.asarray(s, dtype=float)


@dataclass(frozen=True)
class OutcomeFit:
    """Outcome regression evaluated at ``(A, W)``, ``(1, W)`` and ``(0, W)``.

    Predictions are held on the logit scale of the scaled outcome so that
    fluctuations compose exactly.
    """

    eta_aw: NDArray
    eta_1w: NDArray
    eta_0w: NDArray
    scaling: OutcomeScaling
    epsilons: tuple[float, ...] = ()

    @property
    def q_aw(self) -> NDArray:
        return expit(self.eta_aw)

    @property
    def q_1w(self) -> NDArray:
        return expit(self.eta_1w)

    @property
    def q_0w(self) -> NDArray:
        return expit(self.eta_0w)

    def unscaled(self) -> tuple[NDArray, NDArray, NDArray]:
        """Predictions on the original outcome scale."""
        s = self.scaling
        return s.inverse(self.q_aw), s.inverse(self.q_1w), s.inverse(self.q_0w)

    def subset(self, idx) -> "OutcomeFit":
        return replace(self, eta_aw=self.eta_aw[idx], eta_1w=self.eta_1w[idx], eta_0w=self.eta_0w[idx])

    @classmethod
    def from_predictions(
        cls, q_1w: NDArray, q_0w: NDArray, A: NDArray, scaling: OutcomeScaling
    ) -> "OutcomeFit":
        """Build from scaled-scale predictions, clamping into ``[1e-6, 1 - 1e-6]``."""
        q1 = np.clip(np.asarray(q_1w, dtype=float), Q_CLIP, 1 - Q_CLIP)
        q0 = np.clip(np.asarray(q_0w, dtype=float), Q_CLIP, 1 - Q_CLIP)
        A = np.asarray(A, dtype=float)
        e1, e0 = logit(q1), logit(q0)
        return cls(np.where(A == 1, e1, e0), e1, e0, scaling)


@dataclass
class AteEstimate:
    psi: float
    se: float
    ci_lower: float
    ci_upper: float
    method: str
    gamma: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def covers(self, truth: float) -> bool:
        return self.ci_lower <= truth <= self.ci_upper

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "psi": self.psi,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "gamma": self.gamma,
            "diagnostics": dict(self.diagnostics),
        }


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def scale_outcome(Y: NDArray) -> tuple[NDArray, OutcomeScaling]:
    """Min-max scale ``Y`` onto [0, 1]."""
    Y = np.asarray(Y, dtype=float)
    if Y.size < 2:
        raise InsufficientDataError("need at least two outcomes to scale")
    lo, hi = float(Y.min()), float(Y.max())
    if hi == lo:
        raise DegenerateOutcomeError("outcome is constant")
    scaling = OutcomeScaling(lo, hi)
    return np.clip(scaling.transform(Y), 0.0, 1.0), scaling


def clever_covariate(A: NDArray, ps: NDArray) -> NDArray:
    """``A / ps - (1 - A) / (1 - ps)``."""
    A = np.asarray(A, dtype=float)
    ps = np.asarray(ps, dtype=float)
    return A / ps - (1.0 - A) / (1.0 - ps)


def initial_outcome_fit(
    data: Dataset,
    columns: Optional[Sequence[int]] = None,
    scaling: Optional[OutcomeScaling] = None,
) -> OutcomeFit:
    """Main-terms OLS of the scaled outcome on ``A`` and ``W[:, columns]``.

    ``columns=None`` uses every covariate.
    """
    if scaling is None:
        _, scaling = scale_outcome(data.Y)
    y_s = scaling.transform(data.Y)
    W = data.W if columns is None else data.W[:, list(columns)]
    X = design_matrix(np.column_stack([data.A, W]))
    fit = fit_ols(X, y_s)
    X1, X0 = X.copy(), X.copy()
    X1[:, 1], X0[:, 1] = 1.0, 0.0
    return OutcomeFit.from_predictions(fit.predict(X1), fit.predict(X0), data.A, scaling)


def _check_ps(data: Dataset, ps: NDArray) -> NDArray:
    ps = np.asarray(ps, dtype=float)
    if ps.shape != data.A.shape:
        raise ShapeError(f"propensity vector has shape {ps.shape}, expected {data.A.shape}")
    if np.any(ps <= 0) or np.any(ps >= 1):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    return ps


def z_value(level: float) -> float:
    if level == 0.95:
        return 1.96
    return float(norm.ppf(0.5 + level / 2.0))


def ic_confidence_interval(ic: NDArray, level: float = 0.95) -> tuple[float, float, float]:
    """Standard error and CI offsets from an influence curve.

    Uses the divide-by-n variance: ``se = sqrt(mean(ic^2) - mean(ic)^2) / sqrt(n)``.

    >>> se, lo, hi = ic_confidence_interval(np.array([1.0, -1.0]))
    >>> round(se, 4), round(hi, 3)
    (0.7071, 1.386)
    """
    ic = np.asarray(ic, dtype=float)
    n = ic.size
    if n < 2:
        raise InsufficientDataError("need at least two influence-curve values")
    var = max(float(np.mean(ic**2) - np.mean(ic) ** 2), 0.0)
    se = np.sqrt(var) / np.sqrt(n)
    z = z_value(level)
    return float(se), -z * float(se), z * float(se)


def _estimate(psi: float, ic: NDArray, method: str, gamma=None, level=0.95, **diag) -> AteEstimate:
    se, lo, hi = ic_confidence_interval(ic, level)
    return AteEstimate(float(psi), se, float(psi) + lo, float(psi) + hi, method, gamma, diag)


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------


def ipw(data: Dataset, ps: NDArray) -> float:
    """Horvitz-Thompson estimate of the ATE."""
    return float(np.mean(_ipw_terms(data, _check_ps(data, ps))))


def _ipw_terms(data: Dataset, ps: NDArray) -> NDArray:
    return data.A * data.Y / ps - (1.0 - data.A) * data.Y / (1.0 - ps)


def ipw_estimate(data: Dataset, ps: NDArray, gamma=None, level=0.95) -> AteEstimate:
    ps = _check_ps(data, ps)
    terms = _ipw_terms(data, ps)
    psi = float(np.mean(terms))
    return _estimate(psi, terms - psi, "ipw", gamma, level, max_weight=float(np.max(np.abs(clever_covariate(data.A, ps)))))


def _hajek_parts(data: Dataset, ps: NDArray):
    w1 = data.A / ps
    w0 = (1.0 - data.A) / (1.0 - ps)
    s1, s0 = w1.sum(), w0.sum()
    if s1 == 0 or s0 == 0:
        raise EmptyArmError("Hajek estimator needs treated and untreated observations")
    mu1 = float(np.sum(w1 * data.Y) / s1)
    mu0 = float(np.sum(w0 * data.Y) / s0)
    return w1, w0, s1, s0, mu1, mu0


def hajek_ipw(data: Dataset, ps: NDArray) -> float:
    """IPW with arm-wise normalised weights."""
    *_, mu1, mu0 = _hajek_parts(data, _check_ps(data, ps))
    return mu1 - mu0


def hajek_estimate(data: Dataset, ps: NDArray, gamma=None, level=0.95) -> AteEstimate:
    ps = _check_ps(data, ps)
    w1, w0, s1, s0, mu1, mu0 = _hajek_parts(data, ps)
    n = data.n
    ic = n * (w1 * (data.Y - mu1) / s1 - w0 * (data.Y - mu0) / s0)
    return _estimate(mu1 - mu0, ic, "hajek", gamma, level)


def aipw(data: Dataset, ps: NDArray, q: OutcomeFit) -> float:
    """Augmented IPW using the outcome fit ``q`` (mapped back to the original scale)."""
    ps = _check_ps(data, ps)
    q_aw, q_1w, q_0w = q.unscaled()
    return float(np.mean(_aipw_terms(data, ps, q_aw, q_1w, q_0w)))


def _aipw_terms(data, ps, q_aw, q_1w, q_0w):
    return clever_covariate(data.A, ps) * (data.Y - q_aw) + q_1w - q_0w


def aipw_estimate(data: Dataset, ps: NDArray, q: OutcomeFit, gamma=None, level=0.95) -> AteEstimate:
    ps = _check_ps(data, ps)
    terms = _aipw_terms(data, ps, *q.unscaled())
    psi = float(np.mean(terms))
    return _estimate(psi, terms - psi, "aipw", gamma, level)


def empirical_loss(q: OutcomeFit, y_scaled: NDArray) -> float:
    """Mean quasi-binomial negative log-likelihood of ``q`` at the observed ``(A, W)``."""
    return float(np.mean(quasi_binomial_nll(q.eta_aw, y_scaled)))


def fluctuate(q0: OutcomeFit, A: NDArray, y_scaled: NDArray, ps: NDArray, epsilon: Optional[float] = None) -> OutcomeFit:
    """One logistic targeting step of ``q0`` along the clever covariate of ``ps``.

    ``epsilon`` is fitted when not given.
    """
    A = np.asarray(A, dtype=float)
    ps = np.asarray(ps, dtype=float)
    h_aw = clever_covariate(A, ps)
    if epsilon is None:
        epsilon = fit_offset_logistic(q0.eta_aw, h_aw, y_scaled)
    return OutcomeFit(
        q0.eta_aw + epsilon * h_aw,
        q0.eta_1w + epsilon / ps,
        q0.eta_0w - epsilon / (1.0 - ps),
        q0.scaling,
        q0.epsilons + (float(epsilon),),
    )


def influence_curve(data: Dataset, ps: NDArray, q_star: OutcomeFit, psi: float) -> NDArray:
    """``H (Y - Q(A,W)) + Q(1,W) - Q(0,W) - psi`` on the original outcome scale."""
    ps = _check_ps(data, ps)
    q_aw, q_1w, q_0w = q_star.unscaled()
    return clever_covariate(data.A, ps) * (data.Y - q_aw) + q_1w - q_0w - psi


def plug_in(q: OutcomeFit) -> float:
    """``mean(Q(1,W) - Q(0,W))`` on the original scale."""
    return q.scaling.width * float(np.mean(q.q_1w - q.q_0w))


def targeted_estimate(
    data: Dataset, ps: NDArray, q_star: OutcomeFit, method: str = "tmle", gamma=None, level=0.95, **diag
) -> AteEstimate:
    """Plug-in estimate and influence-curve CI for an already-targeted fit."""
    psi = plug_in(q_star)
    ic = influence_curve(data, ps, q_star, psi)
    diag.setdefault("epsilon", q_star.epsilons[-1] if q_star.epsilons else 0.0)
    return _estimate(psi, ic, method, gamma, level, **diag)


def tmle_estimate(
    data: Dataset, ps: NDArray, q0: OutcomeFit, gamma=None, level: float = 0.95
) -> tuple[AteEstimate, OutcomeFit]:
    """TMLE of the ATE: fluctuate ``q0`` along ``H(ps)`` and plug in.

    Parameters
    ----------
    data : Dataset
    ps : ndarray
        Propensity scores, already truncated if truncation is wanted.
    q0 : OutcomeFit
        Initial outcome fit on the scaled outcome.

    Returns
    -------
    estimate : AteEstimate
    q_star : OutcomeFit
        The targeted fit.
    """
    ps = _check_ps(data, ps)
    y_s = q0.scaling.transform(data.Y)
    q_star = fluctuate(q0, data.A, y_s, ps)
    est = targeted_estimate(data, ps, q_star, "tmle", gamma, level, empirical_loss=empirical_loss(q_star, y_s))
    return est, q_star
