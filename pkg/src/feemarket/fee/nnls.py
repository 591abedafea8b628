"""Lawson-Hanson active-set solver for nonnegative least squares.

Works on the normal equations so the caller can pass a Gram matrix that was
already partialled against unconstrained regressors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NnlsResult:
    x: np.ndarray
    gradient: np.ndarray
    n_iter: int

    @property
    def passive(self) -> np.ndarray:
        return self.x > 0


def nnls_gram(G, c, max_iter: int | None = None, tol: float | None = None) -> NnlsResult:
    """Minimise ``x'Gx/2 - c'x`` subject to ``x >= 0``.

    Parameters
    ----------
    G : (n, n) symmetric positive semidefinite array
    c : (n,) array
    max_iter : int, optional
        Defaults to ``30 * n``.
    tol : float, optional
        Dual feasibility tolerance; defaults to ``1e-12 * max(1, |c|_inf, |G|_inf)``.

    Returns
    -------
    NnlsResult
        Solution and gradient ``Gx - c`` (nonnegative at the optimum,
        zero on the passive set).
    """
    G = np.asarray(G, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.size
    if G.shape != (n, n):
        raise ValueError("G must be square and match c")
    max_iter = 30 * max(n, 1) if max_iter is None else max_iter
    tol = 1e-12 * max(1.0, np.abs(c).max(initial=0.0), np.abs(G).max(initial=0.0)) if tol is None else tol

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    it = 0
    w = c - G @ x
    while it < max_iter:
        cand = ~passive & (w > tol)
        if not cand.any():
            break
        j = int(np.argmax(np.where(cand, w, -np.inf)))
        passive[j] = True
        while True:
            it += 1
            idx = np.flatnonzero(passive)
            z = np.zeros(n)
            z[idx] = np.linalg.lstsq(G[np.ix_(idx, idx)], c[idx], rcond=None)[0]
            if np.all(z[idx] > 0):
                x = z
                break
            bad = idx[z[idx] <= 0]
            alpha = np.min(x[bad] / (x[bad] - z[bad]))
            x = x + alpha * (z - x)
            passive &= x > 1e-14 * max(1.0, np.abs(x).max())
            x[~passive] = 0.0
            if it >= max_iter:
                break
        w = c - G @ x
    return NnlsResult(x, G @ x - c, it)


def nnls(A, b, **kw) -> NnlsResult:
    """Nonnegative least squares ``min |Ax - b|`` through its Gram matrix."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    return nnls_gram(A.T @ A, A.T @ b, **kw)


def kkt_violation(G, c, x) -> float:
    """Largest breach of the optimality conditions at ``x``."""
    g = np.asarray(G) @ x - np.asarray(c)
    pos = x > 0
    return float(max(np.abs(g[pos]).max(initial=0.0), (-g[~pos]).max(initial=0.0), (-x).max(initial=0.0)))
