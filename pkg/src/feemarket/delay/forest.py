"""Bagged regression trees, compiled with numba.

Each feature is argsorted once per training set. A tree receives its
bootstrap draw as integer multiplicities, so resampled rows never need
re-sorting: node membership is kept as per-feature index segments that are
stably partitioned after every split.

Split rule: maximise ``S_L^2/W_L + S_R^2/W_R`` over midpoints between
distinct sorted values (sums of centred targets, weights = multiplicities).
Ties go to the lowest feature index and then the first threshold, which
makes a fitted tree depend on each feature only through its ordering.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@numba.njit(cache=True, nogil=True)
def _splitmix(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@numba.njit(cache=True, nogil=True)
def _build_tree(X, y, w, presorted, max_depth, min_leaf, n_sub, seed):
    n, d = X.shape
    m = 0
    wtot = 0.0
    for i in range(n):
        if w[i] > 0:
            m += 1
            wtot += w[i]
    order = np.empty((d, m), dtype=np.int64)
    for f in range(d):
        k = 0
        for j in range(n):
            i = presorted[f, j]
            if w[i] > 0:
                order[f, k] = i
                k += 1

    leaves = int(wtot // min_leaf) if min_leaf > 0 else m
    if leaves < 1:
        leaves = 1
    if max_depth < 40 and leaves > (1 << max_depth):
        leaves = 1 << max_depth
    cap = 2 * leaves - 1

    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    importance = np.zeros(d)

    goes_left = np.zeros(n, dtype=np.bool_)
    buf = np.empty(m, dtype=np.int64)
    yc = np.empty(n)
    feats = np.arange(d)
    state = np.uint64(seed)

    st_s = np.empty(cap, dtype=np.int64)
    st_e = np.empty(cap, dtype=np.int64)
    st_d = np.empty(cap, dtype=np.int64)
    st_n = np.empty(cap, dtype=np.int64)
    top = 0
    st_s[0] = 0
    st_e[0] = m
    st_d[0] = 0
    st_n[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        s = st_s[top]
        e = st_e[top]
        depth = st_d[top]
        node = st_n[top]

        W = 0.0
        S = 0.0
        ymin = np.inf
        ymax = -np.inf
        for j in range(s, e):
            i = order[0, j]
            W += w[i]
            S += w[i] * y[i]
            if y[i] < ymin:
                ymin = y[i]
            if y[i] > ymax:
                ymax = y[i]
        mean = S / W
        value[node] = mean
        if depth >= max_depth or W < 2 * min_leaf or ymin == ymax or n_nodes + 2 > cap:
            continue

        Sc = 0.0
        sse = 0.0
        for j in range(s, e):
            i = order[0, j]
            yc[i] = y[i] - mean
            Sc += w[i] * yc[i]
            sse += w[i] * yc[i] * yc[i]

        if n_sub < d:
            for a in range(n_sub):
                state, r = _splitmix(state)
                b = a + int(r % np.uint64(d - a))
                tmp = feats[a]
                feats[a] = feats[b]
                feats[b] = tmp
            feats[:n_sub].sort()

        best = 0.0
        best_f = -1
        best_pos = -1
        for kk in range(n_sub):
            f = feats[kk]
            wl = 0.0
            sl = 0.0
            for j in range(s, e - 1):
                i = order[f, j]
                wl += w[i]
                sl += w[i] * yc[i]
                xi = X[i, f]
                xn = X[order[f, j + 1], f]
                if xn == xi or wl < min_leaf:
                    continue
                wr = W - wl
                if wr < min_leaf:
                    break
                sr = Sc - sl
                sc = sl * sl / wl + sr * sr / wr
                if sc > best:
                    best = sc
                    best_f = f
                    best_pos = j
        if n_sub < d:
            for a in range(d):
                feats[a] = a

        if best_f < 0 or best <= 1e-12 * sse:
            continue

        xi = X[order[best_f, best_pos], best_f]
        xn = X[order[best_f, best_pos + 1], best_f]
        thr = 0.5 * xi + 0.5 * xn
        if thr >= xn:
            thr = xi

        for j in range(s, e):
            goes_left[order[best_f, j]] = j <= best_pos
        for g in range(d):
            if g == best_f:
                continue
            a = s
            b = 0
            for j in range(s, e):
                i = order[g, j]
                if goes_left[i]:
                    order[g, a] = i
                    a += 1
                else:
                    buf[b] = i
                    b += 1
            for j in range(b):
                order[g, a + j] = buf[j]

        importance[best_f] += best
        feature[node] = best_f
        threshold[node] = thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        mid = best_pos + 1
        st_s[top] = mid
        st_e[top] = e
        st_d[top] = depth + 1
        st_n[top] = rc
        top += 1
        st_s[top] = s
        st_e[top] = mid
        st_d[top] = depth + 1
        st_n[top] = lc
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        importance,
    )


@numba.njit(cache=True, nogil=True)
def _predict(X, feature, threshold, left, right, value):
    n = X.shape[0]
    t = feature.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for k in range(t):
            node = 0
            while feature[k, node] >= 0:
                if X[i, feature[k, node]] <= threshold[k, node]:
                    node = left[k, node]
                else:
                    node = right[k, node]
            acc += value[k, node]
        out[i] = acc / t
    return out


@dataclass(frozen=True)
class TreeParams:
    n_trees: int = 200
    max_depth: int = 15
    min_leaf: int = 20
    feature_subsample: float = 1.0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("need n_trees >= 1, max_depth >= 0, min_leaf >= 1")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("feature_subsample must lie in (0, 1]")


@dataclass
class Forest:
    """Fitted ensemble; tree arrays are padded to a common node count."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    importances: np.ndarray
    n_features: int
    n_train: int

    @property
    def n_trees(self) -> int:
        return self.feature.shape[0]

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features")
        return _predict(X, self.feature, self.threshold, self.left, self.right, self.value)


def presort(X: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.stack([np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]))


def fit_forest(
    X,
    y,
    params: TreeParams = TreeParams(),
    seed: int = 0,
    stream: int = 0,
    n_jobs: int | None = None,
) -> Forest:
    """Fit a bagged forest.

    Parameters
    ----------
    X : (n, d) array
        Finite features.
    y : (n,) array
        Target.
    params : TreeParams
    seed, stream : int
        Tree ``t`` draws its bootstrap from ``SeedSequence([seed, stream, t])``,
        so results do not depend on thread scheduling.
    n_jobs : int, optional
        Worker threads; defaults to the CPU count.

    Returns
    -------
    Forest
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty training set")
    if y.shape != (X.shape[0],):
        raise ValueError("X and y differ in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("features and target must be finite")
    n, d = X.shape
    order = presort(X)
    n_sub = max(1, int(round(params.feature_subsample * d)))

    def one(t: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream, t]))
        if params.bootstrap:
            counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
        else:
            counts = np.ones(n)
        tree_seed = int(rng.integers(0, 2**63 - 1))
        return _build_tree(X, y, counts, order, params.max_depth, params.min_leaf, n_sub, tree_seed)

    workers = n_jobs or None
    if workers == 1 or params.n_trees == 1:
        trees = [one(t) for t in range(params.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            trees = list(ex.map(one, range(params.n_trees)))

    width = max(len(tr[0]) for tr in trees)
    T = len(trees)
    feature = np.full((T, width), -1, dtype=np.int64)
    threshold = np.zeros((T, width))
    left = np.full((T, width), -1, dtype=np.int64)
    right = np.full((T, width), -1, dtype=np.int64)
    value = np.zeros((T, width))
    imp = np.zeros(d)
    for k, (f, th, lc, rc, v, im) in enumerate(trees):
        m = len(f)
        feature[k, :m] = f
        threshold[k, :m] = th
        left[k, :m] = lc
        right[k, :m] = rc
        value[k, :m] = v
        tot = im.sum()
        if tot > 0:
            imp += im / tot
    imp = imp / T
    return Forest(feature, threshold, left, right, value, imp, d, n)
