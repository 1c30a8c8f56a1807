"""One-sided (upper) truncation of propensity scores at empirical quantiles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .exceptions import EmptyInputError


@dataclass(frozen=True)
class TruncationGrid:
    """Increasing set of quantile levels ``gamma`` used as truncation cutpoints."""

    gammas: tuple[float, ...]
    gamma_min: float = 0.60
    gamma_max: float = 1.00
    step: float = 0.01

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        if g.size == 0:
            raise ValueError("grid is empty")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if g[0] <= 0 or g[-1] > 1:
            raise ValueError("grid values must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.gammas)

    def __iter__(self):
        return iter(self.gammas)

    @property
    def values(self) -> NDArray:
        return np.asarray(self.gammas, dtype=float)

    @classmethod
    def from_values(cls, values) -> "TruncationGrid":
        vals = tuple(float(v) for v in values)
        step = float(np.min(np.diff(vals))) if len(vals) > 1 else 0.0
        return cls(vals, vals[0], vals[-1], step)


def make_grid(gamma_min: float = 0.60, gamma_max: float = 1.00, step: float = 0.01) -> TruncationGrid:
    """Arithmetic grid from ``gamma_min`` to ``gamma_max``; the endpoint is always included.

    >>> make_grid(0.9, 1.0, 0.05).gammas
    (0.9, 0.95, 1.0)
    """
    if not 0 < gamma_min < gamma_max <= 1:
        raise ValueError(f"need 0 < gamma_min < gamma_max <= 1, got {gamma_min}, {gamma_max}")
    if step <= 0:
        raise ValueError("step must be positive")
    count = int(math.floor((gamma_max - gamma_min) / step + 1e-9))
    values = [round(gamma_min + i * step, 12) for i in range(count + 1)]
    values = [v for v in values if v <= gamma_max + 1e-12]
    if gamma_max - values[-1] > 1e-12:
        values.append(float(gamma_max))
    else:
        values[-1] = float(gamma_max)
    return TruncationGrid(tuple(values), gamma_min, gamma_max, step)


def _order_index(n: int, gamma: float) -> int:
    # rounding guards against gamma * n landing a hair above an integer
    return max(1, int(math.ceil(round(gamma * n, 9))))


def empirical_quantile(values: NDArray, gamma: float) -> float:
    """The ``ceil(gamma * n)``-th smallest value (lower order statistic)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise EmptyInputError("cannot take the quantile of an empty vector")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    k = _order_index(values.size, gamma)
    return float(np.partition(values, k - 1)[k - 1])


def grid_quantiles(values: NDArray, gammas) -> NDArray:
    """Quantiles of ``values`` at every level in ``gammas`` from one sort."""
    values = np.sort(np.asarray(values, dtype=float).ravel())
    if values.size == 0:
        raise EmptyInputError("cannot take the quantile of an empty vector")
    idx = [_order_index(values.size, float(g)) - 1 for g in gammas]
    return values[idx]


def truncate_upper(ps: NDArray, gamma: float) -> NDArray:
    """Cap ``ps`` at its own empirical ``gamma`` quantile."""
    ps = np.asarray(ps, dtype=float)
    return np.minimum(ps, empirical_quantile(ps, gamma))
