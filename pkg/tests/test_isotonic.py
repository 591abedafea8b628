from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from feemarket.delay.isotonic import is_weakly_decreasing, pava_decreasing, pava_increasing


def brute_decreasing(y):
    """Best weakly decreasing fit by enumerating all contiguous poolings."""
    y = [Fraction(v) for v in y]
    n = len(y)
    best, best_sse = None, None
    for cuts in itertools.product((0, 1), repeat=n - 1):
        blocks, start = [], 0
        for i, c in enumerate(cuts, 1):
            if c:
                blocks.append((start, i))
                start = i
        blocks.append((start, n))
        fit = []
        for a, b in blocks:
            fit += [sum(y[a:b]) / (b - a)] * (b - a)
        if any(u < v for u, v in zip(fit, fit[1:])):
            continue
        sse = sum((u - v) ** 2 for u, v in zip(fit, y))
        if best_sse is None or sse < best_sse:
            best, best_sse = fit, sse
    return best


def test_examples():
    assert pava_decreasing([3, 2, 1]) == [3, 2, 1]
    assert pava_decreasing([3, 1, 2]) == [3, Fraction(3, 2), Fraction(3, 2)]
    assert pava_decreasing([1, 1, 1]) == [1, 1, 1]
    np.testing.assert_array_equal(pava_decreasing(np.array([3.0, 1.0, 2.0])), [3.0, 1.5, 1.5])


def test_errors():
    with pytest.raises(ValueError):
        pava_decreasing([])
    with pytest.raises(ValueError):
        pava_decreasing(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        pava_decreasing(np.array([1.0, 2.0]), np.array([1.0, 0.0]))


def test_exhaustive_small_integer_sequences():
    for n in range(1, 7):
        for y in itertools.product((0, 1, 2), repeat=n):
            assert pava_decreasing(list(y)) == brute_decreasing(y)
            fast = pava_decreasing(np.array(y, dtype=float))
            np.testing.assert_allclose(fast, [float(v) for v in brute_decreasing(y)], atol=1e-9)


@given(st.lists(st.integers(-20, 20), min_size=1, max_size=8))
def test_matches_brute_force(y):
    assert pava_decreasing(y) == brute_decreasing(y)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=60))
def test_float_path_properties(y):
    x = np.array(y)
    fit = pava_decreasing(x)
    assert is_weakly_decreasing(fit)
    assert fit.shape == x.shape
    np.testing.assert_allclose(pava_decreasing(fit), fit, rtol=0, atol=1e-9 * (1 + np.abs(x).max()))
    np.testing.assert_allclose(fit.mean(), x.mean(), atol=1e-9 * (1 + np.abs(x).max()))


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=30))
def test_exact_idempotent_and_mean_preserving(y):
    fit = pava_decreasing(y)
    assert pava_decreasing(fit) == fit
    assert sum(fit) == sum(y)


@given(
    st.lists(st.tuples(st.integers(-10, 10), st.integers(1, 5)), min_size=1, max_size=20),
)
def test_weighted_matches_expanded(pairs):
    y = [a for a, _ in pairs]
    w = [b for _, b in pairs]
    expanded = pava_decreasing([a for a, b in pairs for _ in range(b)])
    fit = pava_decreasing(y, w)
    # the weighted fit equals the unweighted fit on replicated data
    k = 0
    for v, b in zip(fit, w):
        assert all(v == e for e in expanded[k : k + b])
        k += b


def test_increasing_is_mirror():
    y = np.array([1.0, 3.0, 2.0, 4.0])
    np.testing.assert_array_equal(pava_increasing(y), [1.0, 2.5, 2.5, 4.0])
