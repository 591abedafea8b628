"""First stage: cross-fitted delay model, monotone schedules, local slopes."""
from __future__ import annotations

import hashlib
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .forest import Forest, TreeParams, fit_forest
from .isotonic import pava_decreasing

logger = logging.getLogger(__name__)

FEATURES = ("p", "blockspace_util", "mempool_bytes", "mempool_tx_count")
STATE_FEATURES = FEATURES[1:]


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: int = 15
    min_leaf: int = 20
    feature_subsample: float = 1.0
    bootstrap: bool = True
    seed: int = 0
    n_folds: int = 5
    n_jobs: int | None = None

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        self.tree_params()

    def tree_params(self) -> TreeParams:
        return TreeParams(self.n_trees, self.max_depth, self.min_leaf, self.feature_subsample, self.bootstrap)


@dataclass(frozen=True)
class SlopeConfig:
    grid_m: int = 99
    delta: float = 0.05
    trim: float = 0.01
    slope_floor: float = 1e-6
    tau_flat: float = 1e-6
    sweep: str = "epoch_median"  # or "per_tx"

    def __post_init__(self):
        if self.grid_m < 2:
            raise ValueError("grid_m must be >= 2")
        if not 0 < self.trim < 0.5 or self.delta <= 0:
            raise ValueError("need 0 < trim < 1/2 and delta > 0")
        if self.sweep not in ("epoch_median", "per_tx"):
            raise ValueError(f"unknown sweep {self.sweep!r}")


def target(frame: pd.DataFrame) -> np.ndarray:
    return np.log(frame["wait_seconds"].to_numpy(dtype=float) + 1.0)


def features(frame: pd.DataFrame) -> np.ndarray:
    return np.ascontiguousarray(frame[list(FEATURES)].to_numpy(dtype=float))


# -- cross-fitting -----------------------------------------------------------

def assign_folds(epoch_ids: Sequence[int], n_folds: int, seed: int) -> dict[int, int]:
    """Deal epochs round-robin in an order fixed by a keyed hash of their ids."""
    ids = sorted({int(e) for e in epoch_ids})
    if n_folds > len(ids):
        raise ValueError(f"cross-fitting needs n_folds <= number of epochs ({n_folds} > {len(ids)})")

    def key(e: int) -> bytes:
        return hashlib.blake2b(f"{seed}:{e}".encode(), digest_size=8).digest()

    return {e: k % n_folds for k, e in enumerate(sorted(ids, key=key))}


@dataclass
class CrossFit:
    forests: list[Forest]
    fold_of_epoch: dict[int, int]
    train_epochs: list[tuple[int, ...]]
    prediction: np.ndarray
    importances: np.ndarray
    r2: float
    rmse: float

    def forest_for(self, epoch_id: int) -> Forest:
        return self.forests[self.fold_of_epoch[int(epoch_id)]]


def crossfit_predict(frame: pd.DataFrame, cfg: ForestConfig = ForestConfig()) -> CrossFit:
    """Out-of-fold log-delay predictions with epoch-level folds.

    Rows without a confirmation are predicted but never trained on. If the
    frame has a ``source_epoch`` column (bootstrap copies), folds are dealt
    on it so that copies of one epoch never train each other's forest.
    """
    X = features(frame)
    if not np.all(np.isfinite(X)):
        raise ValueError("delay features must be finite")
    y = target(frame)
    epochs = frame["epoch_id"].to_numpy()
    if "source_epoch" in frame:
        pairs = np.unique(np.column_stack([epochs, frame["source_epoch"].to_numpy()]), axis=0)
        by_src = assign_folds(pairs[:, 1], cfg.n_folds, cfg.seed)
        folds = {int(e): by_src[int(s)] for e, s in pairs}
    else:
        folds = assign_folds(epochs, cfg.n_folds, cfg.seed)
    row_fold = np.array([folds[int(e)] for e in epochs])
    labelled = np.isfinite(y)
    pred = np.full(len(frame), np.nan)
    forests, trained_on = [], []
    imp = np.zeros(X.shape[1])
    for k in range(cfg.n_folds):
        train = (row_fold != k) & labelled
        if train.sum() < cfg.min_leaf:
            raise ValueError(f"fold {k}: fewer than min_leaf training rows")
        forest = fit_forest(X[train], y[train], cfg.tree_params(), seed=cfg.seed, stream=k, n_jobs=cfg.n_jobs)
        test = row_fold == k
        if test.any():
            pred[test] = forest.predict(X[test])
        forests.append(forest)
        trained_on.append(tuple(sorted({int(e) for e in epochs[train]})))
        imp += forest.importances
    ok = labelled
    resid = y[ok] - pred[ok]
    ss_tot = float(np.sum((y[ok] - y[ok].mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else float("nan")
    rmse = float(np.sqrt(np.mean(resid**2))) if ok.any() else float("nan")
    return CrossFit(forests, folds, trained_on, pred, imp / cfg.n_folds, r2, rmse)


# -- schedules and slopes ----------------------------------------------------

def priority_grid(grid_m: int = 99) -> np.ndarray:
    return np.arange(1, grid_m + 1) / (grid_m + 1)


@dataclass(frozen=True)
class MonotoneSchedule:
    """Decreasing log-delay schedule on a percentile grid, linearly interpolated."""

    grid: np.ndarray
    raw: np.ndarray
    values: np.ndarray

    def __call__(self, p) -> np.ndarray:
        return np.interp(p, self.grid, self.values)


def monotone_schedule(forest: Forest, state, grid_m: int = 99) -> MonotoneSchedule:
    """Sweep priority over the grid with the other features held at ``state``.

    ``state`` holds the non-priority features (a mapping keyed by name or
    a sequence in model order), normally epoch medians.
    """
    if isinstance(state, Mapping):
        vals = [state.get(k) for k in STATE_FEATURES]
    else:
        vals = list(state) if state is not None else [None]
    if state is None or any(v is None for v in vals) or not np.all(np.isfinite(np.asarray(vals, dtype=float))):
        raise ValueError("epoch has no snapshot state")
    grid = priority_grid(grid_m)
    Xg = np.empty((grid_m, len(FEATURES)))
    Xg[:, 0] = grid
    Xg[:, 1:] = np.asarray(vals, dtype=float)
    raw = forest.predict(Xg)
    return MonotoneSchedule(grid, raw, pava_decreasing(raw))


def _eval_points(p, delta: float, trim: float) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("percentile must lie in (0, 1)")
    lo = np.clip(p - delta, trim, 1 - trim)
    hi = np.clip(p + delta, trim, 1 - trim)
    if np.any(hi <= lo):
        raise ValueError("evaluation points coincide after clipping; delta too small for the trim")
    return lo, hi


def local_slope(schedule, p, delta: float = 0.05, trim: float = 0.01):
    """Positive delay gradient ``(W(p-) - W(p+)) / (p+ - p-)``.

    ``schedule`` is any callable; evaluation points are clipped to
    ``[trim, 1 - trim]``. Returns a float for scalar ``p``.
    """
    lo, hi = _eval_points(p, delta, trim)
    out = (np.asarray(schedule(lo), dtype=float) - np.asarray(schedule(hi), dtype=float)) / (hi - lo)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GradientRegimeReport:
    epoch_ids: np.ndarray
    max_slope: np.ndarray
    tau_flat: float

    @property
    def trivial(self) -> np.ndarray:
        return self.max_slope < self.tau_flat

    @property
    def trivial_share(self) -> float:
        return float(self.trivial.mean()) if self.max_slope.size else 0.0


@dataclass
class DelayFit:
    forest_config: ForestConfig
    slope_config: SlopeConfig
    crossfit: CrossFit
    epoch_ids: np.ndarray
    schedules: np.ndarray  # (n_epochs, grid_m) projected log delay
    raw_schedules: np.ndarray
    tx_ids: np.ndarray
    tx_epoch: np.ndarray
    p: np.ndarray
    pred_log_wait: np.ndarray
    sched_log_wait: np.ndarray
    slope: np.ndarray
    regimes: GradientRegimeReport
    medians: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def grid(self) -> np.ndarray:
        return priority_grid(self.slope_config.grid_m)

    @property
    def fold_of_epoch(self) -> dict[int, int]:
        return self.crossfit.fold_of_epoch

    @property
    def log_slope(self) -> np.ndarray:
        return np.log(np.maximum(self.slope, self.slope_config.slope_floor))

    def schedule(self, epoch_id: int) -> MonotoneSchedule:
        i = int(np.searchsorted(self.epoch_ids, epoch_id))
        if i >= self.epoch_ids.size or self.epoch_ids[i] != epoch_id:
            raise KeyError(f"no schedule for epoch {epoch_id}")
        return MonotoneSchedule(self.grid, self.raw_schedules[i], self.schedules[i])

    def slope_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "tx_id": self.tx_ids,
                "epoch_id": self.tx_epoch,
                "p": self.p,
                "pred_log_wait": self.pred_log_wait,
                "sched_log_wait": self.sched_log_wait,
                "slope": self.slope,
            }
        )


def epoch_medians(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.groupby("epoch_id", sort=True)[list(STATE_FEATURES)].median()


def fit_delay(
    frame: pd.DataFrame,
    forest_cfg: ForestConfig = ForestConfig(),
    slope_cfg: SlopeConfig = SlopeConfig(),
) -> DelayFit:
    """Cross-fit the delay model, then build per-epoch schedules and slopes.

    ``frame`` needs ``tx_id``, ``epoch_id``, ``p``, the state features and
    ``wait_seconds`` (NaN for unconfirmed rows).
    """
    cf = crossfit_predict(frame, forest_cfg)
    med = epoch_medians(frame)
    epoch_ids = med.index.to_numpy(dtype=np.int64)
    grid = priority_grid(slope_cfg.grid_m)
    scheds = np.empty((epoch_ids.size, slope_cfg.grid_m))
    raws = np.empty_like(scheds)
    max_slope = np.empty(epoch_ids.size)
    for i, e in enumerate(epoch_ids):
        sch = monotone_schedule(cf.forest_for(e), med.loc[e].to_dict(), slope_cfg.grid_m)
        scheds[i] = sch.values
        raws[i] = sch.raw
        max_slope[i] = float(np.max(local_slope(sch, grid, slope_cfg.delta, slope_cfg.trim)))

    tx_epoch = frame["epoch_id"].to_numpy(dtype=np.int64)
    p = frame["p"].to_numpy(dtype=float)
    rows = np.searchsorted(epoch_ids, tx_epoch)
    lo, hi = _eval_points(p, slope_cfg.delta, slope_cfg.trim)

    if slope_cfg.sweep == "epoch_median":
        w_lo = _interp_rows(lo, grid, scheds, rows)
        w_hi = _interp_rows(hi, grid, scheds, rows)
        sched_at = _interp_rows(p, grid, scheds, rows)
    else:
        X = features(frame)
        w_lo, w_hi, sched_at = np.empty(p.size), np.empty(p.size), np.empty(p.size)
        for j in range(p.size):
            sch = monotone_schedule(cf.forest_for(tx_epoch[j]), X[j, 1:], slope_cfg.grid_m)
            w_lo[j], w_hi[j], sched_at[j] = sch(lo[j]), sch(hi[j]), sch(p[j])
    slope = np.maximum(0.0, (w_lo - w_hi) / (hi - lo))

    return DelayFit(
        forest_config=forest_cfg,
        slope_config=slope_cfg,
        crossfit=cf,
        epoch_ids=epoch_ids,
        schedules=scheds,
        raw_schedules=raws,
        tx_ids=frame["tx_id"].to_numpy(),
        tx_epoch=tx_epoch,
        p=p,
        pred_log_wait=cf.prediction,
        sched_log_wait=sched_at,
        slope=slope,
        regimes=GradientRegimeReport(epoch_ids, max_slope, slope_cfg.tau_flat),
        medians=med,
    )


def _interp_rows(x: np.ndarray, grid: np.ndarray, table: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``np.interp(x[j], grid, table[rows[j]])`` evaluated one table row at a time."""
    out = np.empty(x.size)
    order = np.argsort(rows, kind="stable")
    bounds = np.flatnonzero(np.diff(rows[order])) + 1
    for idx in np.split(order, bounds):
        if idx.size:
            out[idx] = np.interp(x[idx], grid, table[rows[idx[0]]])
    return out


def delay_config_dict(forest_cfg: ForestConfig, slope_cfg: SlopeConfig) -> dict:
    return {"forest": asdict(forest_cfg), "slopes": asdict(slope_cfg)}


def epoch_schedule(fit: DelayFit, epoch_id: int, state) -> MonotoneSchedule:
    """Schedule for an epoch at ``state``.

    Epochs seen in cross-fitting use their out-of-fold forest. Unseen epochs
    average the raw sweeps of all fold forests before projection.
    """
    grid_m = fit.slope_config.grid_m
    if int(epoch_id) in fit.fold_of_epoch:
        return monotone_schedule(fit.crossfit.forest_for(epoch_id), state, grid_m)
    raws = [monotone_schedule(f, state, grid_m).raw for f in fit.crossfit.forests]
    raw = np.mean(raws, axis=0)
    return MonotoneSchedule(priority_grid(grid_m), raw, pava_decreasing(raw))


def predict_log_slope(fit: DelayFit, frame: pd.DataFrame) -> np.ndarray:
    """Floored log slopes for the rows of ``frame`` using an existing fit.

    State is taken at each epoch's median in ``frame``.
    """
    cfg = fit.slope_config
    med = epoch_medians(frame)
    epoch_ids = med.index.to_numpy(dtype=np.int64)
    table = np.vstack([epoch_schedule(fit, e, med.loc[e].to_dict()).values for e in epoch_ids])
    rows = np.searchsorted(epoch_ids, frame["epoch_id"].to_numpy(dtype=np.int64))
    grid = priority_grid(cfg.grid_m)
    lo, hi = _eval_points(frame["p"].to_numpy(dtype=float), cfg.delta, cfg.trim)
    slope = np.maximum(0.0, (_interp_rows(lo, grid, table, rows) - _interp_rows(hi, grid, table, rows)) / (hi - lo))
    return np.log(np.maximum(slope, cfg.slope_floor))
