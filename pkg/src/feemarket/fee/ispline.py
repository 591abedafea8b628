"""Monotone I-spline basis.

An I-spline of degree ``d`` is the running integral of a normalized
M-spline of degree ``d - 1``. Equivalently it is a tail sum of degree-``d``
B-splines on the clamped knot vector, which is how it is evaluated here.
With ``J`` interior knots there are ``J + d`` basis functions, each rising
from 0 at the lower boundary to 1 at the upper boundary.
"""
from __future__ import annotations

import numpy as np


def _clamped_knots(knots: np.ndarray, degree: int) -> np.ndarray:
    return np.concatenate([np.repeat(knots[0], degree), knots, np.repeat(knots[-1], degree)])


def bspline_basis(x, knots, degree: int) -> np.ndarray:
    """Degree-``degree`` B-splines on clamped ``knots`` via Cox-de Boor.

    Returns an ``(n, J + degree + 1)`` matrix; rows sum to one on the knot
    span, with the right endpoint assigned to the last interval.
    """
    x = np.asarray(x, dtype=float)
    k = np.asarray(knots, dtype=float)
    t = _clamped_knots(k, degree)
    n_int = t.size - 1
    # degree-0 indicators; the last non-degenerate interval is closed
    B = ((t[:-1] <= x[:, None]) & (x[:, None] < t[1:])).astype(float)
    last = np.flatnonzero(t[1:] > t[:-1])[-1]
    B[x == t[-1], last] = 1.0
    for p in range(1, degree + 1):
        m = n_int - p
        out = np.zeros((x.size, m))
        for i in range(m):
            d1 = t[i + p] - t[i]
            d2 = t[i + p + 1] - t[i + 1]
            if d1 > 0:
                out[:, i] += (x - t[i]) / d1 * B[:, i]
            if d2 > 0:
                out[:, i] += (t[i + p + 1] - x) / d2 * B[:, i + 1]
        B = out
    return B


def check_knots(knots) -> np.ndarray:
    k = np.asarray(knots, dtype=float)
    if k.ndim != 1 or k.size < 2:
        raise ValueError("need at least 2 knots")
    if not np.all(np.isfinite(k)):
        raise ValueError("knots must be finite")
    if np.any(np.diff(k) == 0):
        raise ValueError("duplicate knots")
    if np.any(np.diff(k) < 0):
        raise ValueError("knots must be strictly increasing")
    return k


def ispline_basis(values, knots, degree: int = 3) -> np.ndarray:
    """I-spline design matrix.

    Parameters
    ----------
    values : array_like
        Points to evaluate; clamped to ``[knots[0], knots[-1]]``.
    knots : array_like
        Strictly increasing knots including both boundaries.
    degree : int
        Polynomial degree of each basis function (>= 1).

    Returns
    -------
    ndarray, shape (n, len(knots) - 2 + degree)
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    k = check_knots(knots)
    x = np.clip(np.asarray(values, dtype=float).ravel(), k[0], k[-1])
    B = bspline_basis(x, k, degree)
    # tail sums, dropping the full sum (identically one)
    tails = np.cumsum(B[:, ::-1], axis=1)[:, ::-1]
    return np.clip(tails[:, 1:], 0.0, 1.0)


def quantile_knots(values, probs=(0.2, 0.4, 0.6, 0.8, 0.95)) -> np.ndarray:
    """Boundary knots at the sample extremes plus interior quantile knots.

    Coinciding quantiles (common with discrete inputs) are merged.
    """
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("no finite values for knot placement")
    inner = np.quantile(v, probs) if len(probs) else np.array([])
    k = np.unique(np.concatenate([[v.min()], inner, [v.max()]]))
    if k.size < 2:
        raise ValueError("values are constant; cannot place spline knots")
    return k
