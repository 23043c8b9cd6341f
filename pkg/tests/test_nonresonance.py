import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamlattice.errors import ExhaustedRetries, OutOfRange, ZeroIndex
from kamlattice.nonresonance import (ControlFunction, DiophantineParams, FrequencyVector, IndexBudget,
                                     bourgain_bound, check_diophantine, count_indices, enumerate_indices,
                                     estimate_resonant_measure, eval_control, inv_control, inv_control_log,
                                     lambdapiao_bound,
                                     sample_frequency, summability_check)
from kamlattice.spectral import MultiIndex, SiteWindow


def idx(mapping):
    return MultiIndex.from_mapping(mapping)


def test_bourgain_examples():
    assert bourgain_bound(idx({0: 1}), DiophantineParams(0.5, 2)) == pytest.approx(0.25)
    assert bourgain_bound(idx({1: 2, -1: 1}), DiophantineParams(0.999999, 2)) == pytest.approx(0.1, rel=1e-5)
    assert bourgain_bound(idx({1: 2, -1: 1}), DiophantineParams(1.0, 2, strict=False)) == pytest.approx(0.1)
    assert bourgain_bound(idx({3: 1}), DiophantineParams(1.0, 1, strict=False)) == pytest.approx(0.25)
    with pytest.raises(ZeroIndex):
        bourgain_bound(MultiIndex(), DiophantineParams(0.5, 2))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(-4, 4), st.integers(-3, 3).filter(bool), min_size=1, max_size=4),
       st.integers(-6, 6), st.floats(0.01, 0.99), st.floats(1.01, 4))
def test_bourgain_positive_and_decreasing(entries, extra, gamma, mu):
    params = DiophantineParams(gamma, mu)
    b = bourgain_bound(idx(entries), params)
    assert 0 < b <= gamma
    if extra not in entries:
        assert bourgain_bound(idx({**entries, extra: 1}), params) < b


def test_enumeration_is_complete():
    w = SiteWindow(-1, 1)
    budget = IndexBudget(3)
    rows = enumerate_indices(w, budget)
    brute = {r for r in np.ndindex(7, 7, 7)}
    brute = {tuple(np.array(r) - 3) for r in brute}
    brute = {r for r in brute if 0 < sum(map(abs, r)) <= 3}
    # one representative per +-l pair
    reps = {tuple(r) for r in rows}
    assert len(reps) == rows.shape[0] == len(brute) // 2 == count_indices(3, budget)
    assert all(tuple(-np.array(r)) not in reps for r in reps)


def test_check_examples():
    single = FrequencyVector(SiteWindow(0, 0), [1.0])
    assert check_diophantine(single, DiophantineParams(0.1, 2), IndexBudget(3)).holds
    pair = FrequencyVector(SiteWindow(0, 1), [1.0, 1.0])
    verdict = check_diophantine(pair, DiophantineParams(1e-6, 2), IndexBudget(4))
    assert not verdict.holds
    assert verdict.pairing == 0.0
    assert abs(verdict.index.to_dense(pair.window)).tolist() == [1, 1]
    assert verdict.index.to_dense(pair.window).sum() == 0


def test_sampled_frequency_holds_by_enumeration():
    w = SiteWindow.symmetric(1)
    params, budget = DiophantineParams(0.01, 2), IndexBudget(6)
    omega = sample_frequency(w, params, budget, seed=42)
    rows = enumerate_indices(w, budget)
    pairing = np.abs(rows @ omega.values)
    for row, p in zip(rows, pairing):
        assert p > bourgain_bound(MultiIndex.from_dense(w, row), params)


def test_sample_examples():
    w = SiteWindow.symmetric(1)
    params, budget = DiophantineParams(0.01, 3), IndexBudget(5)
    a = sample_frequency(w, params, budget, seed=7)
    assert check_diophantine(a, params, budget).holds
    assert np.array_equal(a.values, sample_frequency(w, params, budget, seed=7).values)
    assert np.all((a.values >= 1) & (a.values <= 2))
    with pytest.raises(ExhaustedRetries):
        sample_frequency(SiteWindow.symmetric(4), DiophantineParams(0.999, 1.01), IndexBudget(2), seed=7,
                         max_retries=50)


def test_check_monotone_in_budget():
    w = SiteWindow.symmetric(1)
    params = DiophantineParams(0.2, 2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        omega = FrequencyVector(w, rng.uniform(1, 2, 3))
        small = check_diophantine(omega, params, IndexBudget(2))
        if not small.holds:
            assert not check_diophantine(omega, params, IndexBudget(5)).holds


def interval_union_fraction(gamma, mu, kmax):
    """Share of [1, 2] within gamma / (k (1 + k^mu)) of zero for some k <= kmax."""
    pieces = []
    for k in range(1, kmax + 1):
        r = gamma / (k * (1 + k ** mu))
        lo, hi = max(1.0, -r), min(2.0, r)
        if hi > lo:
            pieces.append((lo, hi))
    if not pieces:
        return 0.0
    return max(hi for _, hi in pieces) - 1.0


@pytest.mark.parametrize("gamma", [0.1, 3.0, 9.0])
def test_single_site_measure_matches_interval_union(gamma):
    w = SiteWindow(0, 0)
    params = DiophantineParams(gamma, 2, strict=False)
    est = estimate_resonant_measure(w, params, IndexBudget(4), 20000, seed=11)
    exact = interval_union_fraction(gamma, 2, 4)
    assert abs(est.fraction - exact) <= max(est.ci95 * 1.5, 1e-12)


def test_measure_examples():
    w = SiteWindow.symmetric(1)
    budget = IndexBudget(6)
    zero = estimate_resonant_measure(w, DiophantineParams(0.0, 2, strict=False), budget, 4000, seed=3)
    assert zero.fraction == 0.0
    f2 = estimate_resonant_measure(w, DiophantineParams(0.02, 2), budget, 40000, seed=3).fraction
    f4 = estimate_resonant_measure(w, DiophantineParams(0.04, 2), budget, 40000, seed=3).fraction
    assert 1.5 <= f4 / f2 <= 2.5


def test_measure_monotone_and_thread_independent():
    w = SiteWindow.symmetric(1)
    budget = IndexBudget(5)
    fr = [estimate_resonant_measure(w, DiophantineParams(g, 2), budget, 5000, seed=9).fraction
          for g in (0.01, 0.03, 0.09)]
    assert fr == sorted(fr)
    a = estimate_resonant_measure(w, DiophantineParams(0.05, 2), budget, 5000, seed=9, threads=1)
    b = estimate_resonant_measure(w, DiophantineParams(0.05, 2), budget, 5000, seed=9, threads=4)
    assert a == b


def test_control_examples():
    E = ControlFunction("diophantine-exp", {"tau": 1.0})
    assert eval_control(E, 1.0) == pytest.approx(math.e - 1, rel=1e-14)
    assert inv_control(E, math.e - 1) == pytest.approx(1.0, rel=1e-10)
    D = ControlFunction("double-exp", {"lam": 0.5})
    assert D.log_eval(0.04) == pytest.approx(math.exp(5), rel=1e-13)
    with pytest.raises(OutOfRange):
        inv_control(D, 2.0)
    with pytest.raises(OutOfRange):
        eval_control(E, 0.0)


@pytest.mark.parametrize("E", [ControlFunction("diophantine-exp", {"tau": 0.7}),
                               ControlFunction("double-exp", {"lam": 0.5}),
                               ControlFunction("log-iterated", {"lam": 0.5}),
                               ControlFunction("tabulated", {"rho": [0.01, 0.1, 1.0], "values": [1e6, 1e2, 2.0]})])
def test_control_inverse_round_trip(E):
    for rho in (0.02, 0.05, 0.3, 0.8):
        lv = E.log_eval(rho)
        if not math.isfinite(lv):
            continue
        assert E.log_eval(inv_control_log(E, lv)) == pytest.approx(lv, rel=1e-10)
        if lv < 700:
            assert eval_control(E, inv_control(E, math.exp(lv))) == pytest.approx(math.exp(lv), rel=1e-10)


def test_control_strictly_decreasing():
    for E in (ControlFunction("diophantine-exp", {"tau": 1.0}), ControlFunction("log-iterated", {"lam": 1.0})):
        vals = [E.log_eval(r) for r in np.geomspace(1e-3, 1, 30)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_summability_diophantine_exp():
    tau = 1.0
    E = ControlFunction("diophantine-exp", {"tau": tau})
    s = summability_check(E, lambda m: 2.0 ** -m * m * m, 60)
    assert s.converged
    assert s.sum_inv <= tau * (1 / math.log(2) + math.pi ** 2 / 6)


def test_summability_double_exp():
    E = ControlFunction("double-exp", {"lam": 0.5})
    s = summability_check(E, lambda m: (m + 1.0) ** -2, 60)
    assert s.converged and math.isfinite(s.sum_inv)


def test_summability_constant_inverse_diverges():
    E = ControlFunction("tabulated", {"rho": [0.5, 1.0], "values": [1e300, 1.0 + 1e-300]})
    s = summability_check(E, lambda m: 1.0, 40)
    assert not s.converged


def varpi_log_sup(lam, rho, points=2_000_001):
    """Dense log-grid supremum of log(x / log(1+x)^(1+lam) - rho x) over x >= 1."""
    s_end = math.log(math.expm1(rho ** (-1.0 / (1.0 + lam))))
    s = np.linspace(0.0, s_end, points)[:-1]
    x = np.exp(s)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.log(x) + np.log(np.log1p(x) ** -(1.0 + lam) - rho)
    return float(np.nanmax(vals))


BOUND_GRID = [(lam, rho) for lam in (0.5, 1.0, 2.0) for rho in (1e-2, 1e-3, 1e-4)]


@pytest.mark.parametrize("lam,rho", BOUND_GRID)
def test_exponent_bound_against_grid_oracle(lam, rho):
    rep = lambdapiao_bound(lam, rho, 0.9)
    oracle = varpi_log_sup(lam, rho)
    assert rep.log_exponent_max == pytest.approx(oracle, rel=1e-8, abs=1e-10)
    assert rep.log_exponent_max >= oracle - 1e-12
    assert rep.log_exponent_bound == pytest.approx(rho ** -0.9)
    assert rep.holds == (oracle <= rho ** -0.9) == True


def test_exponent_bound_examples():
    assert lambdapiao_bound(1.0, 0.01, 0.9).holds
    trivial = lambdapiao_bound(2.0, 0.1, 0.9)
    assert trivial.holds and trivial.argmax_log_x == 0.0
    assert not lambdapiao_bound(1.0, 1e-4, 0.01).holds
