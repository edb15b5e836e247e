import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from carousel.errors import FitError, InvalidDistributionError
from carousel.phasetype import (ErlangMixture, Hyperexponential, MomentSummary, cdf,
                                dumps, fit, fit_hyperexponential, fit_mixed_erlang,
                                loads, moments, sample)


@pytest.mark.parametrize("dist, x, expected", [
    (ErlangMixture.erlang(4.0, 2), 0.0, 0.0),
    (ErlangMixture.erlang(1.0, 1), math.log(2), 0.5),
    (ErlangMixture(2.0, (0.5, 0.5)), 1.0, 1 - 2 * math.exp(-2)),
])
def test_cdf_examples(dist, x, expected):
    assert cdf(dist, x) == pytest.approx(expected, abs=1e-14)


def test_mixture_cdf_matches_integrated_density():
    dist = ErlangMixture(2.0, (0.5, 0.5))
    density = lambda x: 0.5 * 2 * math.exp(-2 * x) + 0.5 * 4 * x * math.exp(-2 * x)
    value, _ = integrate.quad(density, 0, 1)
    assert cdf(dist, 1.0) == pytest.approx(value, abs=1e-12)
    assert cdf(dist, 1.0) == pytest.approx(0.729330, abs=1e-6)


@pytest.mark.parametrize("dist", [ErlangMixture.erlang(1, 1),
                                  Hyperexponential((0.5, 0.5), (1.0, 3.0))])
def test_cdf_rejects_negative(dist):
    with pytest.raises(ValueError):
        cdf(dist, -0.1)


@given(mu=st.floats(0.1, 50), weights=st.lists(st.floats(0.01, 1), min_size=1, max_size=8),
       xs=st.lists(st.floats(0, 20), min_size=2, max_size=30))
def test_cdf_monotone_and_bounded(mu, weights, xs):
    alpha = np.array(weights) / sum(weights)
    dist = ErlangMixture(mu, tuple(alpha / alpha.sum()))
    x = np.sort(xs)
    g = cdf(dist, x)
    assert np.all(g >= 0) and np.all(g <= 1)
    assert np.all(np.diff(g) >= -1e-15)


def test_moments_examples():
    m = moments(ErlangMixture.erlang(4.0, 2))
    assert (m.mean, m.scv) == pytest.approx((0.5, 0.5), rel=1e-14)
    h = moments(Hyperexponential((0.5, 0.5), (1.0, 3.0)))
    assert (h.mean, h.scv) == pytest.approx((2 / 3, 1.5), rel=1e-14)


def test_hyperexponential_moments_match_sample():
    dist = Hyperexponential((0.5, 0.5), (1.0, 3.0))
    x = sample(dist, np.random.default_rng(3), 10**6)
    assert x.mean() == pytest.approx(2 / 3, rel=5e-3)
    assert x.var() / x.mean() ** 2 == pytest.approx(1.5, rel=2e-2)


def test_degenerate_mixture_is_pure_erlang():
    mix = ErlangMixture(3.0, (0.0, 0.0, 1.0))
    pure = ErlangMixture.erlang(3.0, 3)
    assert mix == pure
    x = np.linspace(0, 4, 50)
    np.testing.assert_array_equal(cdf(mix, x), cdf(pure, x))


@pytest.mark.parametrize("kwargs", [
    dict(mu=-1.0, alpha=(1.0,)),
    dict(mu=0.0, alpha=(1.0,)),
    dict(mu=float("nan"), alpha=(1.0,)),
    dict(mu=1.0, alpha=()),
    dict(mu=1.0, alpha=(0.5, 0.4)),
    dict(mu=1.0, alpha=(1.5, -0.5)),
])
def test_erlang_mixture_validation(kwargs):
    with pytest.raises(InvalidDistributionError):
        ErlangMixture(**kwargs)


@pytest.mark.parametrize("p, mu", [((0.5, 0.5), (1.0,)), ((0.7, 0.7), (1.0, 2.0)),
                                   ((0.5, 0.5), (1.0, 0.0))])
def test_hyperexponential_validation(p, mu):
    with pytest.raises(InvalidDistributionError):
        Hyperexponential(p, mu)


def test_sampling_is_deterministic():
    dist = ErlangMixture(3.0, (0.2, 0.3, 0.5))
    a = sample(dist, np.random.default_rng(11), 1000)
    b = sample(dist, np.random.default_rng(11), 1000)
    np.testing.assert_array_equal(a, b)
    assert isinstance(sample(dist, np.random.default_rng(0)), float)


def test_exponential_sample_mean():
    x = sample(ErlangMixture.erlang(2.0, 1), np.random.default_rng(5), 10**6)
    assert abs(x.mean() - 0.5) < 0.005


@pytest.mark.parametrize("dist", [
    ErlangMixture(3.0, (0.2, 0.3, 0.5)),
    ErlangMixture.erlang(4.0, 2),
    Hyperexponential((0.5, 0.5), (1.0, 3.0)),
    fit_hyperexponential(MomentSummary(1.0, 9.0)),
])
def test_sample_ks_distance(dist):
    x = sample(dist, np.random.default_rng(17), 10**6)
    ks = stats.kstest(x, lambda t: cdf(dist, np.maximum(t, 0))).statistic
    assert ks < 0.002


def test_branch_frequencies_within_three_sigma():
    alpha = np.array([0.2, 0.3, 0.5])
    dist = ErlangMixture(3.0, tuple(alpha))
    n = 10**6
    counts = np.bincount(dist.sample_branches(np.random.default_rng(23), n), minlength=4)[1:]
    sigma = np.sqrt(n * alpha * (1 - alpha))
    assert np.all(np.abs(counts - n * alpha) < 3 * sigma)


# -- fits ---------------------------------------------------------------------

def test_fit_boundary_gives_pure_erlang():
    d = fit_mixed_erlang(MomentSummary(0.5, 0.5))
    assert d.order == 2 and d.alpha == (0.0, 1.0) and d.mu == pytest.approx(4.0, rel=1e-15)


def test_fit_unit_scv_is_exponential():
    d = fit_mixed_erlang(MomentSummary(0.5, 1.0))
    assert d.alpha == (1.0,) and d.mu == 2.0
    h = fit_hyperexponential(MomentSummary(0.5, 1.0))
    assert h.p == (0.5, 0.5) and h.mu == (2.0, 2.0)


def test_fit_mixed_erlang_example():
    d = fit_mixed_erlang(MomentSummary(1.0, 0.4))
    assert d.order == 3
    assert d.alpha[1] == pytest.approx(0.303859, abs=1e-6)
    # the quoted 2.696141 is 3 - p with p already rounded
    assert d.mu == pytest.approx(2.696141, abs=1e-6)


@pytest.mark.parametrize("target, p1, mu1, mu2", [
    ((0.5, 2.0), 0.788675, 3.154701, 0.845299),
    ((1.0, 9.0), 0.947214, 1.894427, 0.105573),
])
def test_fit_hyperexponential_examples(target, p1, mu1, mu2):
    h = fit_hyperexponential(MomentSummary(*target))
    assert h.p[0] == pytest.approx(p1, abs=1e-6)
    assert h.mu == pytest.approx((mu1, mu2), abs=1e-6)


@pytest.mark.parametrize("fitter, scv", [(fit_mixed_erlang, 1.5), (fit_hyperexponential, 0.5)])
def test_fit_rejects_wrong_family(fitter, scv):
    with pytest.raises(FitError, match="instead"):
        fitter(MomentSummary(1.0, scv))


@pytest.mark.parametrize("mean, scv", [(0.0, 1.0), (-1.0, 0.5), (1.0, 0.0), (1.0, -1.0),
                                       (float("nan"), 1.0)])
def test_moment_summary_validation(mean, scv):
    with pytest.raises(FitError):
        MomentSummary(mean, scv)


@settings(max_examples=300)
@given(mean=st.floats(0.05, 5.0), scv=st.floats(0.05, 10.0))
def test_fit_round_trip(mean, scv):
    got = moments(fit(MomentSummary(mean, scv)))
    assert got.mean == pytest.approx(mean, rel=1e-10)
    assert got.scv == pytest.approx(scv, rel=1e-10)


@settings(max_examples=300)
@given(scv=st.floats(0.05, 1.0))
def test_mixed_erlang_weight_in_unit_interval(scv):
    d = fit_mixed_erlang(MomentSummary(1.0, scv))
    assert all(0.0 <= a <= 1.0 for a in d.alpha)


def test_mixed_erlang_weight_is_nonnegative_before_rounding():
    # the raw formula, without the round-off guard, over a dense scv grid
    worst = 0.0
    for c in np.linspace(0.05, 1.0, 20001):
        n = max(2, math.ceil(1 / c - 1e-12))
        p = (n * c - math.sqrt(max(n * (1 + c) - n * n * c, 0.0))) / (1 + c)
        worst = min(worst, p)
    assert worst > -1e-12


@pytest.mark.parametrize("dist", [ErlangMixture(4.0, (0.0, 1.0)),
                                  Hyperexponential((0.5, 0.5), (1.0, 3.0))])
def test_json_round_trip(dist):
    assert loads(dumps(dist)) == dist
    assert json.loads(dumps(dist))["type"] in ("erlang_mixture", "hyperexponential")


@pytest.mark.parametrize("text", ['[1, 2]', '{"type": "weibull"}', '{"type": "erlang_mixture"}',
                                  'not json'])
def test_loads_rejects_malformed(text):
    with pytest.raises(InvalidDistributionError):
        loads(text)
