import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from vpfp_lab.concentration import (TailCurve, binomial_tail_bound, binomial_tail_check,
                                    binomial_tail_exact, c_lambda, exceedance, gamma_fluctuation,
                                    gamma_terms, increment_bound, increment_deviation_check,
                                    infnorm_deviation_bound, lambda_deviation_bound,
                                    lambda_deviation_check, lambda_fluctuation, lambda_terms,
                                    sup_infnorm_deviation, sup_infnorm_statistic)
from vpfp_lab.kernel import Interaction, KernelSpec, k_eval

REP = KernelSpec(Interaction.REPULSIVE)
norm_field = lambda y: stats.norm.cdf(y) - 0.5  # noqa: E731
# P(|X - 60| >= 20) for X ~ Binomial(200, 0.3), scipy.stats.binom
BINOM_EXACT = 0.002565119882035431


def lambda_loop(y, field):
    n = len(y)
    return np.array([abs(sum(k_eval(REP, y[i] - y[j]) for j in range(n) if j != i) / (n - 1)
                         - field(y[i])) for i in range(n)])


def gamma_scan(y, cdf):
    """Grid scan in u, refined with every pair distance and a point just below it."""
    y = np.asarray(y, dtype=float)
    out = []
    for i in range(y.size):
        others = np.delete(y, i)
        d = np.abs(others - y[i])
        u = np.concatenate([np.linspace(0.0, d.max() + 1.0, 4001), d, np.maximum(d - 1e-13, 0.0)])
        emp = (np.abs(others[None, :] - y[i]) <= u[:, None]).mean(axis=1)
        true = cdf(y[i] + u) - cdf(y[i] - u)
        out.append(np.max(np.abs(emp - true)))
    return np.array(out)


def test_lambda_against_double_loop():
    rng = np.random.default_rng(0)
    y = np.round(rng.normal(size=30), 1)  # with ties
    np.testing.assert_allclose(lambda_terms(y, norm_field), lambda_loop(y, norm_field), atol=1e-15)
    batch = rng.normal(size=(4, 25))
    np.testing.assert_allclose(lambda_fluctuation(batch, norm_field),
                               [lambda_loop(b, norm_field).mean() for b in batch], atol=1e-15)
    assert lambda_fluctuation(np.array([1.0, 1.0]), lambda y: 0 * y) == 0.0


def test_lambda_symmetric_pair_vanishes():
    # uniform law on [-1, 1] sampled at its two endpoints: each point sees exactly F
    field = lambda y: np.clip(y, -1, 1) / 2  # noqa: E731
    y = np.array([-1.0, 1.0])
    assert lambda_fluctuation(y, field) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 50))
def test_gamma_matches_dense_scan(seed, n):
    y = np.random.default_rng(seed).normal(size=n)
    np.testing.assert_allclose(gamma_terms(y, stats.norm.cdf), gamma_scan(y, stats.norm.cdf),
                               atol=1e-12, rtol=0)


def test_gamma_point_mass_reference():
    cdf = lambda x: (np.asarray(x) >= 2.0).astype(float)  # noqa: E731
    left = lambda x: (np.asarray(x) > 2.0).astype(float)  # noqa: E731
    assert gamma_fluctuation(np.array([2.0, 2.0]), cdf, left) == 0.0
    g = gamma_terms(np.array([0.0, 1.0, 1.0]), stats.norm.cdf)
    assert np.all((g >= 0) & (g <= 1))


def test_binomial_oracles():
    direct = sum(math.comb(200, k) * 0.3**k * 0.7 ** (200 - k) for k in range(201) if abs(k - 60) >= 20)
    assert binomial_tail_exact(200, 0.3, 0.1) == pytest.approx(direct, rel=1e-10)
    assert binomial_tail_exact(200, 0.3, 0.1) == pytest.approx(BINOM_EXACT, rel=1e-12)
    assert binomial_tail_bound(200, 0.1) == pytest.approx(2 * math.exp(-4), rel=1e-15)
    far = binomial_tail_check(50, 0.3, 0.8, 1000, np.random.default_rng(1))
    assert far.empirical[0] == 0.0 and far.bound[0] > 0
    with pytest.raises(ValueError):
        binomial_tail_check(10, 1.5, 0.1, 10, np.random.default_rng(1))


def test_lambda_deviation_bound_value():
    assert lambda_deviation_bound(100, 0.25) == pytest.approx(200 * math.exp(-12.375))
    rng = np.random.default_rng(2)
    curve = lambda_deviation_check(rng.normal(size=(50, 100)), norm_field, [0.01, 0.25])
    assert curve.empirical[0] == 1.0 and curve.empirical[1] == 0.0


def test_tail_curve_bookkeeping():
    c = TailCurve([0.1, 0.2], [0.5, 0.0], [2.0, 0.01], 100, "x")
    np.testing.assert_array_equal(c.vacuous, [True, False])
    assert c.all_hold()
    bad = TailCurve([0.1], [0.2], [0.01], 10000)
    assert not bad.all_hold()
    assert c.to_csv().splitlines()[0] == "threshold,empirical,bound,vacuous"
    with pytest.raises(ValueError):
        TailCurve([0.1], [0.1, 0.2], [0.3], 10)
    np.testing.assert_array_equal(exceedance([1.0, 2.0, 3.0], [2.0, 3.5]), [2 / 3, 0.0])


def test_increment_constants():
    assert c_lambda(1.0, math.log(1.0)) == 2.5
    assert increment_bound(1.0, 1.0) == pytest.approx(math.exp(-0.5))
    assert increment_bound(4.0, 1.0) == pytest.approx(math.exp(-2.0))


def test_increment_check_window_rules():
    times = np.linspace(0, 0.1, 11)
    paths = np.zeros((5, 11))
    curve = increment_deviation_check(paths, times, 0.0, 0.05, 1.0, [1.0], 2.5)
    assert curve.empirical[0] == 0.0
    with pytest.raises(ValueError):
        increment_deviation_check(paths, times, 0.0, 0.1, 1.0, [1.0], 2.5)
    with pytest.raises(ValueError):
        increment_deviation_check(paths, times, 0.005, 0.05, 1.0, [1.0], 2.5)


def test_sup_infnorm_statistics():
    rng = np.random.default_rng(3)
    paths = rng.normal(size=(20, 10, 64))
    full = [sup_infnorm_statistic(p, 0.1) for p in paths]
    half = [sup_infnorm_statistic(p[::2], 0.1) for p in paths]
    assert all(f >= h for f, h in zip(full, half))
    curve = sup_infnorm_deviation(paths, 0.1, [1e6], 0.4, 1.0, 1.0, 3.0, 4.0)
    assert curve.empirical[0] == 0.0
    b = infnorm_deviation_bound(64, 1.0, 0.1, np.array([0.1, 1.0]), 0.4, 1.0, 3.0, 4.0)
    assert b[0] > b[1] > 0
