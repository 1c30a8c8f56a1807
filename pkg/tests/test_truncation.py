import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from positivity_ctmle.exceptions import EmptyInputError
from positivity_ctmle.truncation import empirical_quantile, grid_quantiles, make_grid, truncate_upper

VALUES = [0.1, 0.5, 0.9, 0.95]

probs = st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=60).map(np.array)
levels = st.floats(0.01, 1.0)


@pytest.mark.parametrize("gamma, expected", [(0.75, 0.9), (1.0, 0.95), (0.25, 0.1)])
def test_empirical_quantile(gamma, expected):
    assert empirical_quantile(VALUES, gamma) == expected


def test_quantile_errors():
    with pytest.raises(EmptyInputError):
        empirical_quantile([], 0.5)
    for bad in (0.0, 1.2, -0.1):
        with pytest.raises(ValueError):
            empirical_quantile(VALUES, bad)


def test_quantile_is_order_statistic_at_grid_levels():
    # gamma * n lands on integers here; float noise must not bump the index
    values = np.arange(1, 101) / 101
    for g in make_grid():
        k = int(round(g * 100))
        assert empirical_quantile(values, g) == values[k - 1]
    assert np.array_equal(grid_quantiles(values, make_grid().gammas),
                          [empirical_quantile(values, g) for g in make_grid()])


def test_truncate_upper_examples():
    assert truncate_upper(VALUES, 0.75).tolist() == [0.1, 0.5, 0.9, 0.9]
    assert truncate_upper(VALUES, 1.0).tolist() == VALUES
    assert truncate_upper([0.5, 0.5, 0.5], 0.6).tolist() == [0.5, 0.5, 0.5]


class TestGrid:
    def test_default_grid(self):
        g = make_grid(0.6, 1.0, 0.01)
        assert len(g) == 41
        assert g.gammas[0] == 0.6 and g.gammas[-1] == 1.0
        assert g.gammas[20] == 0.8

    def test_coarse_grid(self):
        assert make_grid(0.9, 1.0, 0.05).gammas == (0.9, 0.95, 1.0)

    def test_endpoint_appended(self):
        assert make_grid(0.99, 1.0, 0.5).gammas == (0.99, 1.0)

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            make_grid(0.9, 0.9, 0.01)
        with pytest.raises(ValueError):
            make_grid(0.5, 1.0, 0.0)

    @given(st.floats(0.05, 0.95), st.floats(0.001, 0.2))
    def test_grid_invariants(self, lo, step):
        g = make_grid(lo, 1.0, step).values
        assert np.all(np.diff(g) > 0)
        assert g[0] >= lo - 1e-12 and g[-1] == 1.0


@given(probs, levels, levels)
def test_monotone_in_gamma(ps, g1, g2):
    lo, hi = sorted((g1, g2))
    assert np.all(truncate_upper(ps, lo) <= truncate_upper(ps, hi))


@given(probs, levels)
def test_idempotent(ps, g):
    once = truncate_upper(ps, g)
    assert np.array_equal(truncate_upper(once, g), once)


@given(probs, levels)
def test_bounds(ps, g):
    out = truncate_upper(ps, g)
    q = empirical_quantile(ps, g)
    assert out.max() <= q
    assert out.min() == ps.min()
    keep = ps <= q
    assert np.array_equal(out[keep], ps[keep])
