"""Second stage: epoch fixed-effects log-fee regression.

The outcome is the log fee rate. Epoch effects are absorbed by within-epoch
demeaning; an optional I-spline block in impatience carries nonnegative
coefficients, fitted by partialling out the unconstrained regressors and
solving NNLS on the remainder. Standard errors are clustered by epoch.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .ispline import ispline_basis, quantile_knots
from .nnls import nnls_gram

logger = logging.getLogger(__name__)

SLOPE = "log_slope"

# regressor name -> (source column, transform)
CONTROL_DEFS: dict[str, tuple[str, str]] = {
    "rbf": ("rbf", "id"),
    "cpfp": ("cpfp", "id"),
    "log_total_output": ("total_output_sats", "log1p"),
    "log_n_inputs": ("n_inputs", "log"),
    "log_n_outputs": ("n_outputs", "log"),
    "op_return": ("has_op_return", "id"),
    "inscription": ("has_inscription", "id"),
    "log_weight": ("weight_wu", "log"),
}
STATE_DEFS: dict[str, tuple[str, str]] = {
    "blockspace_util": ("blockspace_util", "id"),
    "log_secs_since_block": ("secs_since_last_block", "log1p"),
    "log_mempool_bytes": ("mempool_bytes", "log1p"),
}
_TRANSFORMS = {"id": lambda v: v, "log": np.log, "log1p": np.log1p}


@dataclass(frozen=True)
class FeeSpec:
    """Second-stage model options.

    ``controls`` and ``states`` name entries of :data:`CONTROL_DEFS` and
    :data:`STATE_DEFS`. Regressors with no within-epoch variation are
    dropped (and recorded) when ``drop_constant`` is set; otherwise they
    trigger the rank check.
    """

    include_slope: bool = True
    controls: tuple[str, ...] = tuple(CONTROL_DEFS)
    states: tuple[str, ...] = tuple(STATE_DEFS)
    spline: bool = False
    spline_degree: int = 3
    knot_probs: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 0.95)
    fixed_effects: bool = True
    fee_floor: float = 1.0
    drop_constant: bool = True
    se_inflation: str = "all"  # or "base": slope and controls only
    log_outcome: str | None = None  # column holding the log outcome; default log(fee_rate)

    def __post_init__(self):
        unknown = [c for c in self.controls if c not in CONTROL_DEFS] + [s for s in self.states if s not in STATE_DEFS]
        if unknown:
            raise ValueError(f"unknown regressors {unknown}")
        if self.spline_degree < 1:
            raise ValueError("spline_degree must be >= 1")
        if self.se_inflation not in ("all", "base"):
            raise ValueError("se_inflation must be 'all' or 'base'")


@dataclass
class Design:
    y: np.ndarray
    Z: np.ndarray
    names: list[str]
    groups: np.ndarray  # dense 0..G-1 codes
    epoch_ids: np.ndarray  # original id per code
    n_spline: int
    knots: np.ndarray | None
    impatience: np.ndarray | None


def _column(frame: pd.DataFrame, src: str, how: str) -> np.ndarray:
    if src not in frame:
        raise KeyError(f"missing regressor column {src!r}")
    v = frame[src].to_numpy(dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _TRANSFORMS[how](v)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite values in regressor built from {src!r}")
    return out


def build_design(
    frame: pd.DataFrame,
    spec: FeeSpec,
    knots: np.ndarray | None = None,
    names: Sequence[str] | None = None,
) -> Design:
    """Assemble outcome and regressors. ``frame`` must carry ``log_slope``
    when the slope is included. Passing ``names`` restricts and orders the
    columns to those of an existing fit."""
    cols: dict[str, np.ndarray] = {}
    if spec.include_slope:
        if SLOPE not in frame:
            raise KeyError("missing regressor column 'log_slope'")
        cols[SLOPE] = frame[SLOPE].to_numpy(dtype=float)
    for c in spec.controls:
        cols[c] = _column(frame, *CONTROL_DEFS[c])
    for s in spec.states:
        cols[s] = _column(frame, *STATE_DEFS[s])
    imp = None
    n_spline = 0
    if spec.spline:
        imp = frame["impatience"].to_numpy(dtype=float)
        have = np.isfinite(imp)
        if knots is None:
            knots = quantile_knots(imp[have], spec.knot_probs)
        B = np.zeros((imp.size, knots.size - 2 + spec.spline_degree))
        if have.any():
            B[have] = ispline_basis(imp[have], knots, spec.spline_degree)
        n_spline = B.shape[1]
        for j in range(n_spline):
            cols[f"ispline_{j + 1}"] = B[:, j]
        cols["impatience_missing"] = (~have).astype(float)
    if not spec.fixed_effects:
        cols = {"const": np.ones(len(frame)), **cols}
    if names is not None:
        missing = [n for n in names if n not in cols]
        if missing:
            raise KeyError(f"missing regressors {missing}")
        cols = {n: cols[n] for n in names}
    if spec.log_outcome is not None:
        y = frame[spec.log_outcome].to_numpy(dtype=float) if spec.log_outcome in frame else np.full(len(frame), np.nan)
    elif "fee_rate" in frame:
        y = np.log(frame["fee_rate"].to_numpy(dtype=float))
    else:
        y = np.full(len(frame), np.nan)
    eids = frame["epoch_id"].to_numpy()
    uniq, codes = np.unique(eids, return_inverse=True)
    Z = np.column_stack(list(cols.values())) if cols else np.empty((len(frame), 0))
    n_spline = sum(1 for n in cols if n.startswith("ispline_"))
    return Design(y, Z, list(cols), codes, uniq, n_spline, knots, imp)


def demean(a: np.ndarray, groups: np.ndarray, n_groups: int | None = None) -> np.ndarray:
    """Subtract group means (columnwise for 2-D input).

    Each group is first differenced against its first row. Adding an exactly
    representable constant to one group then leaves the output bit-identical,
    since ``(a_i + c) - (a_0 + c)`` rounds the same as ``a_i - a_0``.
    """
    g = n_groups if n_groups is not None else int(groups.max()) + 1
    counts = np.bincount(groups, minlength=g).astype(float)
    first = np.zeros(g, dtype=np.int64)
    present, idx = np.unique(groups, return_index=True)
    first[present] = idx
    ref = first[groups]

    def one(v):
        d = v - v[ref]
        return d - (np.bincount(groups, weights=d, minlength=g) / counts)[groups]

    if a.ndim == 1:
        return one(np.asarray(a, dtype=float))
    out = np.empty_like(a, dtype=float)
    for j in range(a.shape[1]):
        out[:, j] = one(a[:, j])
    return out


def collinear_columns(Z: np.ndarray, names: Sequence[str], rtol: float = 1e-10) -> list[str]:
    """Columns that add nothing to the span of the columns before them."""
    bad = []
    kept: list[int] = []
    scale = np.sqrt(np.maximum((Z**2).sum(axis=0), 1e-300))
    for j in range(Z.shape[1]):
        trial = kept + [j]
        s = np.linalg.svd(Z[:, trial] / scale[trial], compute_uv=False)
        if s.size and s[-1] <= rtol * max(s[0], 1.0) * np.sqrt(Z.shape[0]):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def cluster_sandwich(Z: np.ndarray, e: np.ndarray, groups: np.ndarray, n_params: int | None = None) -> np.ndarray:
    """Liang-Zeger covariance with the ``G/(G-1) * (N-1)/(N-K)`` correction."""
    N, K = Z.shape
    K = K if n_params is None else n_params
    G = int(groups.max()) + 1
    bread = np.linalg.inv(Z.T @ Z)
    scores = np.zeros((G, Z.shape[1]))
    for j in range(Z.shape[1]):
        scores[:, j] = np.bincount(groups, weights=Z[:, j] * e, minlength=G)
    meat = scores.T @ scores
    V = bread @ meat @ bread
    V = 0.5 * (V + V.T)
    return V * (G / (G - 1)) * ((N - 1) / (N - K))


def hc1_sandwich(Z: np.ndarray, e: np.ndarray) -> np.ndarray:
    N, K = Z.shape
    bread = np.linalg.inv(Z.T @ Z)
    meat = (Z * e[:, None] ** 2).T @ Z
    V = bread @ meat @ bread
    return 0.5 * (V + V.T) * N / (N - K)


@dataclass
class FeeFit:
    spec: FeeSpec
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    naive_cov: np.ndarray
    alpha0: float
    epoch_ids: np.ndarray
    xi: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    r2_overall: float
    r2_within: float
    psi: float
    n_obs: int
    n_clusters: int
    n_below_floor: int
    knots: np.ndarray | None = None
    n_spline: int = 0
    impatience: np.ndarray | None = None
    dropped: list[str] = field(default_factory=list)

    @property
    def df(self) -> int:
        return self.n_clusters - 1

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    @property
    def naive_se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.naive_cov), 0.0))

    @property
    def alpha1(self) -> float:
        return float(self.coef[self.names.index(SLOPE)])

    @property
    def alpha1_se(self) -> float:
        return float(self.se[self.names.index(SLOPE)])

    def index(self, name: str) -> int:
        return self.names.index(name)

    def coef_of(self, name: str) -> float:
        return float(self.coef[self.index(name)])

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        q = stats.t.ppf(0.5 + level / 2, self.df)
        b, s = self.coef_of(name), float(self.se[self.index(name)])
        return b - q * s, b + q * s

    @property
    def spline_slice(self) -> slice:
        start = next((i for i, n in enumerate(self.names) if n.startswith("ispline_")), len(self.names))
        return slice(start, start + self.n_spline)

    @property
    def delta(self) -> np.ndarray:
        return self.coef[self.spline_slice]

    @property
    def spline_columns(self) -> list[int]:
        """Basis indices of the spline coefficients that were kept."""
        return [int(n.split("_")[1]) - 1 for n in self.names if n.startswith("ispline_")]

    def spline_basis(self, values) -> np.ndarray:
        if self.n_spline == 0 or self.knots is None:
            raise ValueError("fit has no impatience spline")
        return ispline_basis(values, self.knots, self.spec.spline_degree)[:, self.spline_columns]

    @property
    def theta_names(self) -> list[str]:
        return [n for n in self.names if n in STATE_DEFS]

    def se_inflation(self) -> float:
        """Mean ratio of clustered to iid standard errors."""
        keep = np.ones(len(self.names), dtype=bool)
        if self.spec.se_inflation == "base":
            keep = np.array([n == SLOPE or n in CONTROL_DEFS for n in self.names])
        keep &= self.naive_se > 0
        return float(np.mean(self.se[keep] / self.naive_se[keep])) if keep.any() else float("nan")

    def xi_series(self) -> pd.Series:
        return pd.Series(self.xi, index=pd.Index(self.epoch_ids, name="epoch_id"), name="xi")

    def table(self) -> pd.DataFrame:
        return coefficient_table(self)


def _stars(p: float) -> str:
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


def coefficient_table(fit: FeeFit) -> pd.DataFrame:
    se = fit.se
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, fit.coef / se, np.nan)
    p = 2 * stats.t.sf(np.abs(t), fit.df)
    return pd.DataFrame(
        {
            "name": fit.names,
            "estimate": fit.coef,
            "se": se,
            "t": t,
            "p": p,
            "stars": [_stars(v) if np.isfinite(v) else "" for v in p],
        }
    )


def _select_rows(frame: pd.DataFrame, spec: FeeSpec) -> tuple[pd.DataFrame, int]:
    keep = frame["fee_rate"].to_numpy(dtype=float) >= spec.fee_floor
    n_below = int((~keep).sum())
    if n_below:
        logger.info("excluding %d rows below the fee floor %.3g", n_below, spec.fee_floor)
    return frame.loc[keep], n_below


def attach_slopes(frame: pd.DataFrame, delayfit) -> pd.DataFrame:
    if delayfit is None:
        return frame
    if len(delayfit.tx_ids) != len(frame) or not np.array_equal(delayfit.tx_ids, frame["tx_id"].to_numpy()):
        raise ValueError("delay fit rows do not match the frame")
    out = frame.copy()
    out[SLOPE] = delayfit.log_slope
    return out


def fit_fee_model(frame: pd.DataFrame, delayfit=None, spec: FeeSpec = FeeSpec()) -> FeeFit:
    """Estimate the log fee-rate equation.

    Parameters
    ----------
    frame : DataFrame
        Transaction rows (see :meth:`feemarket.core.Dataset.to_frame`).
    delayfit : DelayFit, optional
        Source of ``log_slope``; if omitted the frame must carry it.
    spec : FeeSpec

    Returns
    -------
    FeeFit
    """
    frame = attach_slopes(frame, delayfit)
    frame, n_below = _select_rows(frame, spec)
    d = build_design(frame, spec)
    G = d.epoch_ids.size
    if spec.fixed_effects and G < 2:
        raise ValueError("need at least 2 epochs: fixed effects absorb a single epoch")
    y, Z, names = d.y, d.Z, list(d.names)
    if spec.fixed_effects:
        yt, Zt = demean(y, d.groups, G), demean(Z, d.groups, G)
    else:
        yt, Zt = y, Z

    dropped = []
    if spec.drop_constant:
        scale = np.abs(Zt).max(axis=0, initial=0.0) if Zt.size else np.zeros(0)
        flat = scale <= 1e-12 * np.maximum(1.0, np.abs(Z).max(axis=0, initial=0.0))
        if spec.include_slope and flat[names.index(SLOPE)]:
            raise ValueError("log_slope has no within-epoch variation")
        dropped = [n for n, f in zip(names, flat) if f]
        if dropped:
            logger.info("dropping regressors without within-epoch variation: %s", dropped)
            keep = ~flat
            Z, Zt, names = Z[:, keep], Zt[:, keep], [n for n, k in zip(names, keep) if k]
    bad = collinear_columns(Zt, names)
    if bad:
        raise ValueError(f"rank-deficient design; collinear columns: {bad}")

    spline_idx = np.array([i for i, n in enumerate(names) if n.startswith("ispline_")], dtype=np.int64)
    free_idx = np.array([i for i in range(len(names)) if i not in set(spline_idx.tolist())], dtype=np.int64)
    N = yt.size
    coef = np.zeros(len(names))
    if spline_idx.size == 0:
        coef = np.linalg.lstsq(Zt, yt, rcond=None)[0]
    else:
        U, B = Zt[:, free_idx], Zt[:, spline_idx]
        if free_idx.size:
            Q, _ = np.linalg.qr(U)
            Bt = B - Q @ (Q.T @ B)
            ytt = yt - Q @ (Q.T @ yt)
        else:
            Bt, ytt = B, yt
        res = nnls_gram(Bt.T @ Bt / N, Bt.T @ ytt / N)
        coef[spline_idx] = res.x
        if free_idx.size:
            coef[free_idx] = np.linalg.lstsq(U, yt - B @ res.x, rcond=None)[0]

    e = yt - Zt @ coef
    raw_resid = y - Z @ coef
    alpha0 = float(np.mean(raw_resid)) if spec.fixed_effects else 0.0
    if spec.fixed_effects:
        counts = np.bincount(d.groups, minlength=G)
        xi = np.bincount(d.groups, weights=raw_resid, minlength=G) / counts - alpha0
    else:
        xi = np.zeros(G)
    fitted = y - e
    # spline coefficients held at zero are treated as known: inference is
    # conditional on the active set, so they carry no variance
    free = np.ones(len(names), dtype=bool)
    free[spline_idx] = coef[spline_idx] > 0
    Zf = Zt[:, free]
    K = Zf.shape[1]
    n_params = K + (G if spec.fixed_effects else 0)
    cov = np.zeros((len(names), len(names)))
    naive = np.zeros_like(cov)
    cov[np.ix_(free, free)] = cluster_sandwich(Zf, e, d.groups, n_params=K)
    s2 = float(e @ e) / max(N - n_params, 1)
    naive[np.ix_(free, free)] = s2 * np.linalg.inv(Zf.T @ Zf)
    sst_within = float(yt @ yt) if spec.fixed_effects else float(np.sum((y - y.mean()) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    ssr = float(e @ e)
    r2_w = 1.0 - ssr / sst_within if sst_within > 0 else float("nan")
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    psi = float(np.mean(np.exp(e)))
    return FeeFit(
        spec=spec,
        names=names,
        coef=coef,
        cov=cov,
        naive_cov=naive,
        alpha0=alpha0,
        epoch_ids=d.epoch_ids,
        xi=xi,
        residuals=e,
        fitted=fitted,
        y=y,
        groups=d.groups,
        r2_overall=r2,
        r2_within=r2_w,
        psi=psi,
        n_obs=N,
        n_clusters=G,
        n_below_floor=n_below,
        knots=d.knots,
        n_spline=int(spline_idx.size),
        impatience=d.impatience,
        dropped=dropped,
    )


# -- prediction ---------------------------------------------------------------

def smearing_factor(residuals) -> float:
    return float(np.mean(np.exp(np.asarray(residuals, dtype=float))))


def linear_predictor(fit: FeeFit, rows: pd.DataFrame, use_epoch_effects: bool = True) -> np.ndarray:
    d = build_design(rows, fit.spec, knots=fit.knots, names=fit.names)
    eta = d.Z @ fit.coef + fit.alpha0
    if use_epoch_effects and fit.spec.fixed_effects:
        lookup = dict(zip(fit.epoch_ids.tolist(), fit.xi.tolist()))
        eta = eta + np.array([lookup.get(int(e), 0.0) for e in rows["epoch_id"].to_numpy()])
    return eta


def smearing_predict(fit: FeeFit, rows: pd.DataFrame, use_epoch_effects: bool = True) -> np.ndarray:
    """Fee-rate predictions in levels: ``exp(linear predictor) * psi``."""
    return np.exp(linear_predictor(fit, rows, use_epoch_effects)) * fit.psi


def counterfactual(
    fit: FeeFit,
    rows: pd.DataFrame,
    S_cf: Mapping[str, float] | Sequence[float] | None = None,
    pi: float = 1.0,
    below_eps_mean: float = 0.0,
    use_epoch_effects: bool = True,
) -> np.ndarray:
    """Expected fee rates with the state regressors set to ``S_cf``.

    ``S_cf`` is on the regressor scale (e.g. log mempool bytes), either a
    mapping by state name or a vector ordered like ``fit.theta_names``.
    ``None`` keeps each row's observed state.
    """
    if not 0.0 <= pi <= 1.0:
        raise ValueError("pi must lie in [0, 1]")
    eta = linear_predictor(fit, rows, use_epoch_effects)
    if S_cf is not None:
        names = fit.theta_names
        if isinstance(S_cf, Mapping):
            unknown = set(S_cf) - set(names)
            if unknown:
                raise ValueError(f"unknown state coordinates {sorted(unknown)}")
            target = dict(S_cf)
        else:
            vec = np.asarray(S_cf, dtype=float).ravel()
            if vec.size != len(names):
                raise ValueError(f"S_cf has {vec.size} entries; the fit has {len(names)} state coefficients")
            target = dict(zip(names, vec))
        for name, val in target.items():
            obs = _column(rows, *STATE_DEFS[name])
            eta = eta + fit.coef_of(name) * (val - obs)
    m_cf = np.exp(eta) * fit.psi
    return pi * m_cf + (1.0 - pi) * below_eps_mean


def spline_effect(delta, cov_delta, basis_from, basis_to) -> tuple[float, float]:
    """Change in the spline term between two basis rows, with delta-method SE."""
    g = np.asarray(basis_to, dtype=float) - np.asarray(basis_from, dtype=float)
    eff = float(g @ np.asarray(delta, dtype=float))
    var = float(g @ np.asarray(cov_delta, dtype=float) @ g)
    return eff, float(np.sqrt(max(var, 0.0)))


def aggregate_spline_effect(fit: FeeFit, from_q: float = 0.5, to_q: float = 0.95) -> tuple[float, float]:
    """Implied log fee change moving impatience between two quantiles."""
    if fit.n_spline == 0 or fit.knots is None:
        raise ValueError("fit has no impatience spline")
    imp = fit.impatience[np.isfinite(fit.impatience)]
    lo, hi = np.quantile(imp, [from_q, to_q])
    B = fit.spline_basis([lo, hi])
    sl = fit.spline_slice
    return spline_effect(fit.delta, fit.cov[sl, sl], B[0], B[1])


def spline_curve(fit: FeeFit, values) -> np.ndarray:
    return fit.spline_basis(values) @ fit.delta
