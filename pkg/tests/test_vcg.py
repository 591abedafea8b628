from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from feemarket.sim.vcg import (
    StaticInstance,
    compute_vcg_schedule,
    count_single_crossing_violations,
    foc_residual,
    single_crossing_report,
    vcg_payment_bruteforce,
    vcg_payment_discrete,
)


def test_discrete_payment_examples():
    inst = StaticInstance((5.0, 3.0, 2.0))
    assert inst.W == (1.0, 2.0, 3.0)
    assert vcg_payment_discrete(inst, 1) == 5.0
    assert vcg_payment_discrete(inst, 3) == 0.0
    assert vcg_payment_discrete(StaticInstance((5.0, 3.0, 2.0), delays=(1.0, 1.0, 2.0)), 1) == 2.0


def test_bruteforce_examples():
    inst = StaticInstance((5.0, 3.0, 2.0))
    assert vcg_payment_bruteforce(inst, 1) == 5.0
    assert vcg_payment_bruteforce(StaticInstance((4.0,)), 1) == 0.0


def test_rank_out_of_range():
    inst = StaticInstance((1.0, 2.0))
    for m in (0, 3):
        with pytest.raises(IndexError):
            vcg_payment_discrete(inst, m)
        with pytest.raises(IndexError):
            vcg_payment_bruteforce(inst, m)


def test_from_costs_sorts_into_priority_order():
    assert StaticInstance.from_costs([1, 3, 2]).costs == (3.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        StaticInstance((1.0, 2.0), delays=(2.0, 1.0))


@given(
    st.lists(st.floats(0, 100, allow_nan=False, allow_subnormal=False), min_size=1, max_size=12),
    st.integers(1, 4),
)
def test_discrete_equals_bruteforce(costs, slots):
    inst = StaticInstance.from_costs(costs, slots)
    for m in range(1, inst.n + 1):
        assert vcg_payment_discrete(inst, m) == vcg_payment_bruteforce(inst, m)


def test_payment_nonincreasing_in_rank(rng):
    inst = StaticInstance.from_costs(rng.lognormal(size=30), 3)
    pay = [vcg_payment_discrete(inst, m) for m in range(1, inst.n + 1)]
    assert all(a >= b for a, b in zip(pay, pay[1:]))


# -- continuous schedule ------------------------------------------------------

def test_schedule_constant_integrand():
    s = compute_vcg_schedule(1.0, 1.0, 1.0, 1.0, 101)
    np.testing.assert_allclose(s.b, s.p, atol=1e-15)
    assert s.b[0] == 0.0


def test_schedule_linear_cost_closed_form():
    for m, tol in ((100, 1e-4), (1000, 1e-6)):
        s = compute_vcg_schedule(lambda q: q, 1.0, grid_m=m)
        err = np.abs(s.b - s.p**2 / 2).max()
        assert err < tol
        # the integrand is linear, so the trapezoid rule is exact up to rounding
        assert err < 1e-15


def test_schedule_zero_gradient():
    s = compute_vcg_schedule(lambda q: q, 0.0, grid_m=50)
    assert np.all(s.b == 0.0)


def test_schedule_scales_with_kappa_and_weight():
    base = compute_vcg_schedule(lambda q: q, lambda q: 1 + q, grid_m=200)
    scaled = compute_vcg_schedule(lambda q: q, lambda q: 1 + q, kappa=2.0, weight_wu=3.0, grid_m=200)
    np.testing.assert_allclose(scaled.b, 6.0 * base.b, rtol=1e-14)
    assert np.all(np.diff(base.b) >= 0)


def test_schedule_errors():
    with pytest.raises(ValueError):
        compute_vcg_schedule(lambda q: q - 0.5, 1.0)
    with pytest.raises(ValueError):
        compute_vcg_schedule(1.0, -1.0)
    with pytest.raises(ValueError):
        compute_vcg_schedule(1.0, 1.0, grid_m=1)


def test_schedule_matches_cumulative_discrete_payments(rng):
    # capacity 1: W_j = j, so in percentile terms D = n everywhere
    n = 2000
    inst = StaticInstance.from_costs(rng.uniform(0, 1, n))
    asc = np.array(inst.costs[::-1])
    sched = compute_vcg_schedule(lambda q: np.quantile(asc, q), float(n), grid_m=4001)
    ms = np.arange(1, n + 1, 97)
    disc = np.array([vcg_payment_discrete(inst, int(m)) for m in ms])
    cont = sched((n - ms) / n)
    assert np.abs(disc - cont).max() / n < 5.0 / n


def test_foc_residual_vanishes_with_refinement():
    c, d = (lambda q: q**2), (lambda q: 1 + np.sin(3 * q) ** 2)
    errs = [foc_residual(compute_vcg_schedule(c, d, 2.0, 1.0, m), c, d).max() for m in (50, 200, 800)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-4


# -- single crossing ------------------------------------------------------------

def test_single_crossing_counts():
    assert count_single_crossing_violations([1, 2, 3], [0.1, 0.5, 0.9]) == 0
    assert count_single_crossing_violations([1, 2, 3], [0.1, 0.5, 0.3]) == 1
    assert count_single_crossing_violations([1, 1, 2], [0.5, 0.2, 0.8]) == 0
    assert count_single_crossing_violations([1, 2], [0.5, 0.5]) == 0
    assert single_crossing_report([1, 2, 3], [0.1, 0.5, 0.9]).ok


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=0, max_size=30))
def test_single_crossing_matches_pair_count(pairs):
    c = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    brute = sum(1 for i in range(len(c)) for j in range(len(c)) if c[i] < c[j] and p[i] > p[j])
    assert count_single_crossing_violations(c, p) == brute
