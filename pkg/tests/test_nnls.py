from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import nnls as scipy_nnls

from feemarket.fee.nnls import kkt_violation, nnls, nnls_gram


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_agrees_with_scipy(seed, k):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(30, k))
    b = rng.normal(size=30)
    ours = nnls(A, b).x
    ref, _ = scipy_nnls(A, b)
    f = lambda x: np.sum((A @ x - b) ** 2)
    assert f(ours) <= f(ref) + 1e-10 * (1 + f(ref))
    np.testing.assert_allclose(ours, ref, atol=1e-8)


@given(st.integers(0, 10_000), st.integers(1, 10))
def test_kkt(seed, k):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(40, k)) * rng.uniform(0.1, 10, k)
    b = rng.normal(size=40)
    G, c = A.T @ A, A.T @ b
    res = nnls_gram(G, c)
    assert np.all(res.x >= 0)
    assert kkt_violation(G, c, res.x) < 1e-8 * max(1.0, np.abs(G).max())
    g = res.gradient
    assert np.all(g[~res.passive] >= -1e-8)
    np.testing.assert_allclose(g[res.passive], 0.0, atol=1e-8)


def test_unconstrained_optimum_is_returned():
    A = np.eye(3)
    b = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(nnls(A, b).x, b)


def test_all_negative_target_gives_zero():
    A = np.eye(3)
    assert np.all(nnls(A, -np.ones(3)).x == 0.0)


def test_shape_error():
    with pytest.raises(ValueError):
        nnls_gram(np.eye(2), np.ones(3))
