import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carousel.analytic import solve
from carousel.errors import ConvergenceError
from carousel.oracles import (GRID_TOL, grid_solve, histogram_csv, integral_residual,
                              next_wait, series_partial_sums, series_terms, simulate)
from carousel.phasetype import ErlangMixture, Hyperexponential, MomentSummary, fit

DISTS = [
    ErlangMixture.erlang(2.0, 1),
    ErlangMixture.erlang(4.0, 2),
    ErlangMixture(3.0, (0.2, 0.3, 0.5)),
    Hyperexponential((0.5, 0.5), (1.0, 3.0)),
    fit(MomentSummary(0.3, 6.0)),
    ErlangMixture.erlang(40.0, 1),
]


# -- grid solver ----------------------------------------------------------------

@pytest.mark.parametrize("dist", DISTS)
def test_grid_fixed_point(dist):
    g = grid_solve(dist, 2000)
    assert g.last_change < GRID_TOL
    assert np.all(g.f >= 0)
    assert g.pi0 + g.mass == pytest.approx(1.0, abs=1e-12)
    assert integral_residual(g, dist) < 1e-10
    assert g.diagnostics["contraction_ratio"] < 1
    assert g.tau * (g.ew + dist.mean) == pytest.approx(1.0, abs=1e-14)


def test_grid_matches_analytic_exponential(erl21):
    g = grid_solve(erl21, 10**4)
    a = solve(erl21)
    assert abs(g.pi0 - a.pi0) < 1e-6


@pytest.mark.parametrize("dist", DISTS[:4])
def test_grid_second_order_convergence(dist):
    p = [grid_solve(dist, m).pi0 for m in (2000, 4000, 8000)]
    assert abs(p[0] - p[1]) < 4 * abs(p[1] - p[2]) + 1e-9


def test_richardson_improves_accuracy(erl42):
    exact = solve(erl42).pi0
    plain = grid_solve(erl42, 500)
    extrapolated = grid_solve(erl42, 500, richardson=True)
    assert abs(extrapolated.pi0 - exact) < 0.1 * abs(plain.pi0 - exact)


def test_grid_validation(erl21):
    with pytest.raises(ValueError):
        grid_solve(erl21, 50)


def test_grid_reports_non_convergence(erl21, monkeypatch):
    import carousel.oracles as oracles
    monkeypatch.setattr(oracles, "MAX_SWEEPS", 3)
    with pytest.raises(ConvergenceError, match="ratio"):
        grid_solve(erl21, 200)


def test_grid_json(erl21):
    obj = json.loads(json.dumps(grid_solve(erl21, 200).to_json_dict()))
    assert obj["method"] == "grid" and {"pi0", "ew", "tau"} <= set(obj)


# -- series -----------------------------------------------------------------------

@pytest.mark.parametrize("dist", DISTS)
def test_series_odd_term_bound(dist):
    M = 4000
    terms = series_terms(dist, M, 17)
    for n in range(1, 9):
        assert terms[2 * n].max() <= 2.0 ** -n + 10 / M


@pytest.mark.parametrize("dist", DISTS)
def test_series_term_norms(dist):
    norms = np.abs(series_terms(dist, 2000, 30)).max(axis=1)
    assert np.all(np.diff(norms[2:]) <= 1e-15)
    live = norms[4:] > 1e-250
    ratios = norms[5:][live[1:]] / norms[4:-1][live[1:]]
    assert np.all(ratios <= 0.75)


def test_series_first_term_and_limit(erl42):
    M = 2000
    g = grid_solve(erl42, M)
    sums = series_partial_sums(erl42, M, 60)
    x = np.linspace(0, 1, M + 1)
    np.testing.assert_allclose(sums[0].f, g.pi0 * erl42.cdf(1 - x), atol=1e-15)
    assert np.max(np.abs(sums[-1].f - g.f)) < 1e-10
    assert len(sums) == 60 and sums[-1].iterations == 60


def test_series_validation(erl21):
    with pytest.raises(ValueError):
        series_terms(erl21, 1000, 61)


# -- simulation -------------------------------------------------------------------

def test_one_step():
    assert next_wait(0.1, 0.7, 0.2) == pytest.approx(0.4, abs=1e-15)
    assert next_wait(0.5, 0.3, 0.2) == 0.0


def test_stub_sampler_recursion(erl21):
    # constant picks of 0.2 cap every wait at R - 0.2 < 0.8
    est = simulate(erl21, 10**4, 10**3, seed=3, sampler=lambda g, n: np.full(n, 0.2))
    assert est.max_wait < 0.8
    assert 0 <= est.pi0 <= 1


@pytest.mark.parametrize("dist", DISTS)
def test_simulation_invariants(dist):
    est = simulate(dist, 10**5, seed=9)
    assert est.max_wait < 1
    assert 0 <= est.pi0 <= 1
    assert est.histogram.sum() + est.pi0 == pytest.approx(1.0, abs=1e-12)
    assert len(est.histogram) == 200


def test_simulation_is_deterministic(erl42):
    a = simulate(erl42, 10**5, seed=42)
    b = simulate(erl42, 10**5, seed=42)
    assert a.to_json_dict() == b.to_json_dict()
    assert histogram_csv(a) == histogram_csv(b)
    assert simulate(erl42, 10**5, seed=43).ew != a.ew


@pytest.mark.parametrize("steps, burn_in", [(10**3, 10**4), (10**4, 10)])
def test_simulation_validation(erl21, steps, burn_in):
    with pytest.raises(ValueError):
        simulate(erl21, steps, burn_in)


def test_simulation_matches_analytic(erl21):
    a = solve(erl21)
    est = simulate(erl21, 10**7, seed=1)
    assert abs(est.tau - a.tau) < 3 * est.tau_se
    assert abs(est.ew - a.ew) < 3 * est.ew_se
    assert abs(est.pi0 - a.pi0) < 3 * est.pi0_se


@pytest.mark.parametrize("dist", [DISTS[1], DISTS[3]])
def test_histogram_total_variation(dist):
    g = grid_solve(dist, 10**4)
    est = simulate(dist, 10**7, seed=5)
    edges = est.bin_edges
    # exact bin masses of the grid density (bins align with every 50th node)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (g.f[1:] + g.f[:-1]) * np.diff(g.x))])
    bins = np.diff(cum[np.searchsorted(g.x, edges - 1e-12)])
    assert 0.5 * np.abs(bins - est.histogram).sum() < 0.01


def test_histogram_csv(erl21):
    lines = histogram_csv(simulate(erl21, 10**4, seed=0)).splitlines()
    assert lines[0] == "bin_left,bin_right,mass" and len(lines) == 201


@settings(max_examples=10, deadline=None)
@given(mean=st.floats(0.1, 2.0), scv=st.floats(0.2, 5.0), seed=st.integers(0, 2**32 - 1))
def test_simulation_properties(mean, scv, seed):
    dist = fit(MomentSummary(mean, scv))
    est = simulate(dist, 10**4, 10**3, seed=seed)
    assert est.max_wait < 1
    assert est.histogram.sum() + est.pi0 == pytest.approx(1.0, abs=1e-12)
    assert est.tau > 0 and np.isfinite(est.tau_se)
