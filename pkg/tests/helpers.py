"""Shared random test instances."""

import numpy as np
from scipy.special import expit

from positivity_ctmle.estimators import Dataset, initial_outcome_fit


def small_dataset(seed: int, n: int = 40, p: int = 2, shift: float = 0.5) -> Dataset:
    """Confounded toy data with a handful of covariates."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, p))
    ps = expit(shift + W[:, 0] - 0.5 * W[:, -1])
    A = (rng.random(n) < ps).astype(float)
    if A.sum() < 2:
        A[:2] = 1.0
    if A.sum() > n - 2:
        A[:2] = 0.0
    Y = 1.0 + W[:, 0] + 0.5 * W[:, -1] + A + rng.standard_normal(n)
    return Dataset(Y, A, W)


def random_instance(seed: int, n: int = 200, p: int = 5):
    """(data, ps, q0) with a propensity score drawn independently of the outcome fit."""
    data = small_dataset(seed, n, p, shift=1.0)
    rng = np.random.default_rng(seed + 10_000)
    ps = np.clip(expit(1.0 + 1.5 * data.W[:, 0] + rng.normal(0, 0.5, n)), 1e-3, 1 - 1e-3)
    q0 = initial_outcome_fit(data, columns=[1])
    return data, ps, q0


# criterion number -> (passed, description, detail); printed by the terminal-summary hook
ACCEPTANCE_RESULTS: dict = {}


class record:
    """Context manager storing the outcome of one acceptance criterion."""

    def __init__(self, number: int, description: str):
        self.number = number
        self.description = description
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        passed = exc_type is None
        detail = self.detail if passed or not exc else f"{self.detail} {exc}".strip()
        ACCEPTANCE_RESULTS[self.number] = (passed, self.description, detail.splitlines()[0] if detail else "")
        line = f"criterion {self.number}: {'PASS' if passed else 'FAIL'} - {self.description}"
        print(line + (f" ({self.detail})" if self.detail else ""))
        return False
