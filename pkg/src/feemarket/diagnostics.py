"""Temporal-stability diagnostics for the two-stage estimator.

Intraclass correlation and design effects, variance decomposition, epoch
effect autocorrelation, rolling-window refits, expanding-window
out-of-sample R-squared and cumulative precision of the slope coefficient.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .delay.stage import predict_log_slope
from .estimate import TwoStageConfig, TwoStageFit, fit_two_stage
from .fee.model import SLOPE, FeeFit, _select_rows, build_design, demean, fit_fee_model


def _codes(epochs) -> tuple[np.ndarray, np.ndarray]:
    uniq, codes = np.unique(np.asarray(epochs), return_inverse=True)
    return uniq, codes


# -- ICC ------------------------------------------------------------------------

@dataclass(frozen=True)
class IccReport:
    name: str
    icc: float
    mean_cluster_size: float
    n_obs: int
    n_clusters: int

    @property
    def deff(self) -> float:
        return 1.0 + (self.mean_cluster_size - 1.0) * self.icc

    @property
    def effective_n(self) -> float:
        return self.n_obs / self.deff


def icc(values, epochs, name: str = "") -> IccReport:
    """One-way ANOVA intraclass correlation, clipped to ``[0, 1]``.

    Parameters
    ----------
    values : array_like
        Observations.
    epochs : array_like
        Cluster label per observation.

    Returns
    -------
    IccReport
        ``(MSB - MSW) / (MSB + (m - 1) MSW)`` with ``m`` the mean cluster size.
    """
    y = np.asarray(values, dtype=float)
    _, g = _codes(epochs)
    N, G = y.size, int(g.max()) + 1 if y.size else 0
    if G < 2 or N < 2:
        raise ValueError("icc needs at least 2 epochs and 2 rows")
    if N == G:
        raise ValueError("icc undefined: every epoch is a singleton")
    n = np.bincount(g, minlength=G).astype(float)
    means = np.bincount(g, weights=y, minlength=G) / n
    msb = float(np.sum(n * (means - y.mean()) ** 2)) / (G - 1)
    msw = float(np.sum((y - means[g]) ** 2)) / (N - G)
    m = N / G
    den = msb + (m - 1.0) * msw
    if den <= 0:
        raise ValueError("icc undefined: values are constant")
    return IccReport(name, float(np.clip((msb - msw) / den, 0.0, 1.0)), m, N, G)


def icc_table(frame: pd.DataFrame, columns, epoch_col: str = "epoch_id") -> pd.DataFrame:
    reps = [icc(frame[c].to_numpy(dtype=float), frame[epoch_col].to_numpy(), c) for c in columns]
    return pd.DataFrame(
        {
            "name": [r.name for r in reps],
            "icc": [r.icc for r in reps],
            "mean_cluster_size": [r.mean_cluster_size for r in reps],
            "deff": [r.deff for r in reps],
            "effective_n": [r.effective_n for r in reps],
        }
    )


# -- variance decomposition --------------------------------------------------

@dataclass(frozen=True)
class VarianceShares:
    total: float
    between: float
    within: float
    icc: float

    @property
    def between_share(self) -> float:
        return self.between / self.total if self.total > 0 else float("nan")

    @property
    def within_share(self) -> float:
        return self.within / self.total if self.total > 0 else float("nan")


def _shares(values, epochs) -> VarianceShares:
    y = np.asarray(values, dtype=float)
    _, g = _codes(epochs)
    G = int(g.max()) + 1
    n = np.bincount(g, minlength=G).astype(float)
    means = np.bincount(g, weights=y, minlength=G) / n
    total = float(np.mean((y - y.mean()) ** 2))
    between = float(np.sum(n * (means - y.mean()) ** 2) / y.size)
    within = float(np.sum((y - means[g]) ** 2) / y.size)
    try:
        rho = icc(y, epochs).icc
    except ValueError:
        rho = float("nan")
    return VarianceShares(total, between, within, rho)


@dataclass(frozen=True)
class VarianceDecomposition:
    outcome: VarianceShares
    residual: VarianceShares | None


def variance_decomposition(outcome, residuals, epochs) -> VarianceDecomposition:
    """Size-weighted between/within split of the outcome and of residuals.

    Between is the size-weighted variance of epoch means and within the
    size-weighted mean of within-epoch variances, so the two add up to the
    total (population) variance. ``residuals`` may be ``None``.
    """
    uniq, _ = _codes(epochs)
    if uniq.size < 2:
        raise ValueError("variance decomposition needs at least 2 epochs")
    res = None if residuals is None else _shares(residuals, epochs)
    return VarianceDecomposition(_shares(outcome, epochs), res)


# -- epoch-effect autocorrelation ---------------------------------------------

@dataclass(frozen=True)
class Correlogram:
    lags: np.ndarray
    rho: np.ndarray
    n: int

    @property
    def band(self) -> float:
        """Approximate 95% white-noise band."""
        return 1.96 / np.sqrt(self.n)


def fe_autocorrelation(xi, max_lag: int = 10) -> Correlogram:
    """Sample autocorrelations of a time-ordered epoch-effect series."""
    x = np.asarray(xi, dtype=float)
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    if x.size < max_lag + 2:
        raise ValueError(f"need at least max_lag + 2 = {max_lag + 2} epochs, got {x.size}")
    c = x - x.mean()
    c0 = float(c @ c)
    if c0 <= 0:
        raise ValueError("autocorrelation undefined for a constant series")
    lags = np.arange(1, max_lag + 1)
    rho = np.array([float(c[:-k] @ c[k:]) / c0 for k in lags])
    return Correlogram(lags, rho, x.size)


# -- rolling windows -----------------------------------------------------------

def _epoch_order(frame: pd.DataFrame) -> np.ndarray:
    """Epoch ids in time order (ids are assigned chronologically)."""
    return np.unique(frame["epoch_id"].to_numpy(dtype=np.int64))


@dataclass
class RollingReport:
    windows: pd.DataFrame  # one row per (window, coefficient)
    summary: pd.DataFrame  # per coefficient: min, max, range, pooled SE, ratio


def rolling_fit(
    frame: pd.DataFrame,
    config: TwoStageConfig = TwoStageConfig(),
    n_windows: int = 5,
    pooled: FeeFit | None = None,
    n_jobs: int = 1,
) -> RollingReport:
    """Re-run both stages on contiguous, equal blocks of epochs.

    ``pooled`` is the full-sample fit used for the range/SE ratio; it is
    estimated if omitted.
    """
    epochs = _epoch_order(frame)
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    if epochs.size < n_windows:
        raise ValueError(f"need at least {n_windows} epochs, got {epochs.size}")
    blocks = np.array_split(epochs, n_windows)
    if min(b.size for b in blocks) < 2:
        raise ValueError("every window needs at least 2 epochs")
    eid = frame["epoch_id"].to_numpy(dtype=np.int64)

    def one(b):
        sub = frame[np.isin(eid, b)].reset_index(drop=True)
        return fit_two_stage(sub, config).fee

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            fits = list(ex.map(one, blocks))
    else:
        fits = [one(b) for b in blocks]
    if pooled is None:
        pooled = fits[0] if n_windows == 1 else fit_two_stage(frame, config).fee

    rows = []
    for w, (b, fit) in enumerate(zip(blocks, fits)):
        for name, c, s in zip(fit.names, fit.coef, fit.se):
            rows.append({"window": w, "first_epoch": int(b[0]), "last_epoch": int(b[-1]), "name": name, "estimate": c, "se": s})
    windows = pd.DataFrame(rows)
    pooled_se = dict(zip(pooled.names, pooled.se))
    summ = []
    for name in pooled.names:
        est = windows.loc[windows["name"] == name, "estimate"].to_numpy()
        rng = float(est.max() - est.min()) if est.size else float("nan")
        se = float(pooled_se[name])
        summ.append(
            {
                "name": name,
                "n_windows": int(est.size),
                "min": float(est.min()) if est.size else float("nan"),
                "max": float(est.max()) if est.size else float("nan"),
                "range": rng,
                "pooled_se": se,
                "range_over_se": rng / se if se > 0 else float("nan"),
            }
        )
    return RollingReport(windows, pd.DataFrame(summ))


# -- expanding-window out-of-sample ---------------------------------------------

@dataclass(frozen=True)
class OosSplit:
    fraction: float
    n_train_epochs: int
    n_test_epochs: int
    r2_within_full: float
    r2_within_restricted: float
    r2_strict: float
    train_r2_within_full: float
    train_r2_within_restricted: float
    outcome_shares: VarianceShares | None
    residual_shares: VarianceShares | None
    flags: tuple[str, ...] = ()

    @property
    def delta_r2(self) -> float:
        return self.r2_within_full - self.r2_within_restricted


@dataclass
class OosReport:
    splits: list[OosSplit] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "fraction": s.fraction,
                    "n_train_epochs": s.n_train_epochs,
                    "n_test_epochs": s.n_test_epochs,
                    "r2_within_full": s.r2_within_full,
                    "r2_within_restricted": s.r2_within_restricted,
                    "delta_r2": s.delta_r2,
                    "r2_strict": s.r2_strict,
                    "train_r2_within_full": s.train_r2_within_full,
                    "train_r2_within_restricted": s.train_r2_within_restricted,
                    "flags": ";".join(s.flags),
                }
                for s in self.splits
            ]
        )


def _r2(y, yhat) -> float:
    sst = float(np.sum((y - y.mean()) ** 2))
    if not sst > 0:
        return float("nan")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / sst


def _within_r2(fit: FeeFit, test: pd.DataFrame) -> float:
    """Training coefficients applied to test-epoch demeaned data."""
    d = build_design(test, fit.spec, knots=fit.knots, names=fit.names)
    G = d.epoch_ids.size
    yt, Zt = demean(d.y, d.groups, G), demean(d.Z, d.groups, G)
    sst = float(yt @ yt)
    if not sst > 0:
        return float("nan")
    e = yt - Zt @ fit.coef
    return 1.0 - float(e @ e) / sst


def oos_split(train: pd.DataFrame, test: pd.DataFrame, config: TwoStageConfig, fraction: float = float("nan")) -> OosSplit:
    """Three out-of-sample R-squared protocols for one train/test partition.

    Test slopes come from the training delay fit: epochs it cross-fitted
    keep their out-of-fold forest, new epochs use the fold-forest average.
    """
    ts = fit_two_stage(train, config)
    full = ts.fee
    restricted = fit_fee_model(train, ts.delay, replace(config.fee, include_slope=False))
    test = test.copy()
    test[SLOPE] = predict_log_slope(ts.delay, test)
    test, _ = _select_rows(test, config.fee)
    flags = []
    r_full = _within_r2(full, test)
    r_rest = _within_r2(restricted, test)
    if not np.isfinite(r_full):
        flags.append("degenerate_within_variance")
    # strict: structural part plus the training intercept, no test-epoch means
    d = build_design(test, full.spec, knots=full.knots, names=full.names)
    pred = d.Z @ full.coef + full.alpha0
    r_strict = _r2(d.y, pred)
    if not np.isfinite(r_strict):
        flags.append("degenerate_test_variance")
    eids = test["epoch_id"].to_numpy()
    out_sh = res_sh = None
    if np.unique(eids).size >= 2:
        dec = variance_decomposition(d.y, d.y - pred, eids)
        out_sh, res_sh = dec.outcome, dec.residual
    return OosSplit(
        fraction,
        int(np.unique(train["epoch_id"]).size),
        int(np.unique(eids).size),
        r_full,
        r_rest,
        r_strict,
        full.r2_within,
        restricted.r2_within,
        out_sh,
        res_sh,
        tuple(flags),
    )


def expanding_oos(
    frame: pd.DataFrame,
    config: TwoStageConfig = TwoStageConfig(),
    splits=(0.6, 0.7, 0.8),
    n_jobs: int = 1,
) -> OosReport:
    """Train on the first ``f`` share of epochs, test on the rest, for each ``f``."""
    epochs = _epoch_order(frame)
    eid = frame["epoch_id"].to_numpy(dtype=np.int64)
    jobs = []
    for f in splits:
        if not 0 < f < 1:
            raise ValueError("split fractions must lie in (0, 1)")
        k = int(round(f * epochs.size))
        if k < 2 or k >= epochs.size:
            raise ValueError(f"split {f}: training window must span >= 2 epochs and leave a test epoch")
        tr = np.isin(eid, epochs[:k])
        jobs.append((f, frame[tr].reset_index(drop=True), frame[~tr].reset_index(drop=True)))

    def one(job):
        f, tr, te = job
        return oos_split(tr, te, config, f)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            out = list(ex.map(one, jobs))
    else:
        out = [one(j) for j in jobs]
    return OosReport(out)


# -- cumulative precision ------------------------------------------------------

@dataclass(frozen=True)
class PrecisionCurve:
    n_epochs: np.ndarray
    se: np.ndarray

    @property
    def loglog_slope(self) -> float:
        """OLS slope of log SE on log epoch count (about -1/2 for root-k)."""
        ok = np.isfinite(self.se) & (self.se > 0)
        return float(np.polyfit(np.log(self.n_epochs[ok]), np.log(self.se[ok]), 1)[0])


def cumulative_precision(frame: pd.DataFrame, spec, ks=None, coef: str = SLOPE) -> PrecisionCurve:
    """Clustered SE of one coefficient on the first ``k`` epochs in time order.

    ``frame`` carries the full-sample cross-fitted ``log_slope``; slopes are
    held fixed so only the fee stage is refit per ``k``.
    """
    epochs = _epoch_order(frame)
    if ks is None:
        ks = np.unique(np.linspace(max(5, epochs.size // 10), epochs.size, 10).astype(int))
    ks = np.asarray(ks, dtype=int)
    if ks.min() < 2 or ks.max() > epochs.size:
        raise ValueError("epoch counts must lie in [2, number of epochs]")
    eid = frame["epoch_id"].to_numpy(dtype=np.int64)
    se = np.empty(ks.size)
    for i, k in enumerate(ks):
        sub = frame[np.isin(eid, epochs[:k])].reset_index(drop=True)
        sub_fit = fit_fee_model(sub, None, spec)
        se[i] = sub_fit.se[sub_fit.names.index(coef)]
    return PrecisionCurve(ks, se)


def with_slopes(frame: pd.DataFrame, fit: TwoStageFit) -> pd.DataFrame:
    out = frame.copy()
    out[SLOPE] = fit.delay.log_slope
    return out


def slope_icc_report(frame: pd.DataFrame, columns=("p", "blockspace_util", "mempool_bytes")) -> pd.DataFrame:
    """ICC table for the outcome, the slope regressor and selected features."""
    f = frame.copy()
    f["log_fee_rate"] = np.log(f["fee_rate"].to_numpy(dtype=float))
    return icc_table(f, ["log_fee_rate", SLOPE, *columns])
