from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from feemarket.fee.ispline import bspline_basis, check_knots, ispline_basis, quantile_knots


def ispline_oracle(x, knots, degree):
    """Integrate each normalized M-spline of degree ``degree - 1`` with scipy."""
    t = np.concatenate([[knots[0]] * degree, knots, [knots[-1]] * degree])
    n_basis = len(knots) - 2 + degree
    out = np.zeros((x.size, n_basis))
    for j in range(1, n_basis + 1):
        seg = t[j : j + degree + 1]
        b = BSpline.basis_element(seg, extrapolate=False)
        anti = b.antiderivative()
        xs = np.clip(x, seg[0], seg[-1])
        val = degree / (seg[-1] - seg[0]) * (anti(xs) - anti(seg[0]))
        # basis_element drops the closed right end; a normalized M-spline integrates to one
        out[:, j - 1] = np.where(x >= seg[-1], 1.0, val)
    return out


def test_degree_one_ramp():
    B = ispline_basis([0.25], [0.0, 1.0], degree=1)
    assert B.shape == (1, 1)
    assert B[0, 0] == pytest.approx(0.25, abs=1e-15)


def test_column_count_and_boundaries():
    knots = np.array([0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0])
    B = ispline_basis(np.array([0.0, 1.0]), knots, 3)
    assert B.shape == (2, len(knots) - 2 + 3)
    np.testing.assert_array_equal(B[0], 0.0)
    np.testing.assert_allclose(B[1], 1.0, atol=1e-14)


@pytest.mark.parametrize("degree", [1, 2, 3, 4])
def test_matches_integrated_mspline_oracle(degree, rng):
    knots = np.sort(np.concatenate([[0.0, 2.0], rng.uniform(0, 2, 4)]))
    x = np.linspace(-0.5, 2.5, 301)
    np.testing.assert_allclose(ispline_basis(x, knots, degree), ispline_oracle(x, knots, degree), atol=1e-12)


def test_bspline_partition_of_unity(rng):
    knots = np.array([0.0, 0.2, 0.5, 1.0])
    x = rng.uniform(0, 1, 200)
    np.testing.assert_allclose(bspline_basis(np.append(x, 1.0), knots, 3).sum(axis=1), 1.0, atol=1e-14)


def test_constant_input():
    B = ispline_basis(np.full(5, 0.37), [0.0, 0.5, 1.0])
    assert np.all(B == B[0])


@given(st.lists(st.floats(-1, 3, allow_nan=False), min_size=2, max_size=50))
def test_sorted_inputs_give_sorted_columns(values):
    x = np.sort(values)
    B = ispline_basis(x, [0.0, 0.4, 0.7, 1.3, 2.0], 3)
    assert np.all(np.diff(B, axis=0) >= -1e-15)
    assert np.all((B >= 0) & (B <= 1))


def test_knot_errors():
    with pytest.raises(ValueError, match="duplicate"):
        ispline_basis([0.5], [0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ValueError, match="at least 2"):
        ispline_basis([0.5], [0.0])
    with pytest.raises(ValueError):
        check_knots([1.0, 0.0])
    with pytest.raises(ValueError):
        ispline_basis([0.5], [0.0, 1.0], degree=0)


def test_quantile_knots_merge_ties():
    v = np.array([1.0] * 50 + [2.0] * 30 + [5.0] * 20)
    k = quantile_knots(v)
    assert np.all(np.diff(k) > 0)
    assert k[0] == 1.0 and k[-1] == 5.0
    with pytest.raises(ValueError):
        quantile_knots(np.ones(10))
