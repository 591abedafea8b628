"""Weighted least-squares projection onto weakly decreasing sequences."""
from __future__ import annotations

from collections.abc import Sequence
from fractions import Fraction

import numba
import numpy as np


@numba.njit(cache=True)
def _pava_dec(y, w):
    n = y.size
    level = np.empty(n)
    weight = np.empty(n)
    length = np.empty(n, dtype=np.int64)
    top = -1
    for i in range(n):
        top += 1
        level[top] = y[i]
        weight[top] = w[i]
        length[top] = 1
        # a later block may not sit above an earlier one
        while top > 0 and level[top] > level[top - 1]:
            tw = weight[top] + weight[top - 1]
            level[top - 1] = (level[top] * weight[top] + level[top - 1] * weight[top - 1]) / tw
            weight[top - 1] = tw
            length[top - 1] += length[top]
            top -= 1
    out = np.empty(n)
    k = 0
    for b in range(top + 1):
        for _ in range(length[b]):
            out[k] = level[b]
            k += 1
    return out


def _pava_exact(y: list[Fraction], w: list[Fraction]) -> list[Fraction]:
    blocks: list[list] = []  # [sum_wy, sum_w, length]
    for yi, wi in zip(y, w):
        blocks.append([yi * wi, wi, 1])
        while len(blocks) > 1 and blocks[-1][0] / blocks[-1][1] > blocks[-2][0] / blocks[-2][1]:
            s, t, n = blocks.pop()
            blocks[-1][0] += s
            blocks[-1][1] += t
            blocks[-1][2] += n
    out: list[Fraction] = []
    for s, t, n in blocks:
        out.extend([s / t] * n)
    return out


def pava_decreasing(values, weights=None):
    """Pool-adjacent-violators fit of a weakly decreasing sequence.

    Float arrays go through a compiled path and come back as arrays. Any
    other sequence (ints, :class:`~fractions.Fraction`) is fitted in exact
    rational arithmetic and returned as a list of fractions.
    """
    if isinstance(values, np.ndarray) and values.dtype.kind == "f":
        y = np.ascontiguousarray(values, dtype=float)
        if y.size == 0:
            raise ValueError("empty input")
        if not np.all(np.isfinite(y)):
            raise ValueError("values must be finite")
        w = np.ones_like(y) if weights is None else np.ascontiguousarray(weights, dtype=float)
        if w.shape != y.shape or np.any(w <= 0):
            raise ValueError("weights must be positive and match values")
        return _pava_dec(y, w)
    ys = [Fraction(v) for v in values]
    if not ys:
        raise ValueError("empty input")
    ws = [Fraction(1)] * len(ys) if weights is None else [Fraction(v) for v in weights]
    if len(ws) != len(ys) or any(v <= 0 for v in ws):
        raise ValueError("weights must be positive and match values")
    return _pava_exact(ys, ws)


def pava_increasing(values, weights=None):
    if isinstance(values, np.ndarray) and values.dtype.kind == "f":
        return -pava_decreasing(-values, weights)
    return [-v for v in pava_decreasing([-Fraction(v) for v in values], weights)]


def is_weakly_decreasing(x: Sequence, tol: float = 0.0) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(np.diff(x) <= tol))
