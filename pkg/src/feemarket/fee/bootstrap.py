"""Epoch-block bootstrap of the full two-stage estimator."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)


def resample_epochs(frame: pd.DataFrame, draw) -> pd.DataFrame:
    """Stack the epochs listed in ``draw`` (repeats allowed).

    The first copy of an epoch keeps its id and its rows keep their original
    order, so a draw equal to the original epoch multiset reproduces
    ``frame`` exactly. Later copies get fresh epoch ids above the current
    maximum and suffixed transaction ids. ``source_epoch`` records where each
    row came from.
    """
    epochs = frame["epoch_id"].to_numpy(dtype=np.int64)
    next_id = int(epochs.max()) + 1
    rows_of = {int(e): np.flatnonzero(epochs == e) for e in np.unique(epochs)}
    seen: dict[int, int] = {}
    parts, copy_no, new_ids = [], [], []
    for e in np.asarray(draw, dtype=np.int64):
        e = int(e)
        if e not in rows_of:
            raise KeyError(f"epoch {e} not in frame")
        k = seen.get(e, 0)
        seen[e] = k + 1
        idx = rows_of[e]
        parts.append(idx)
        copy_no.append(np.full(idx.size, k))
        new_ids.append(np.full(idx.size, e if k == 0 else next_id))
        if k:
            next_id += 1
    idx = np.concatenate(parts)
    copy = np.concatenate(copy_no)
    order = np.lexsort((idx, copy))
    out = frame.iloc[idx[order]].reset_index(drop=True)
    copy = copy[order]
    out["source_epoch"] = out["epoch_id"].to_numpy()
    out["epoch_id"] = np.concatenate(new_ids)[order]
    if copy.any():
        tx = out["tx_id"].astype(str).to_numpy().copy()
        dup = copy > 0
        tx[dup] = [f"{t}#{c}" for t, c in zip(tx[dup], copy[dup])]
        out["tx_id"] = tx
    return out


@dataclass
class BootstrapResult:
    names: list[str]
    point: np.ndarray
    replicates: np.ndarray  # (B, K); NaN rows for failed replicates
    draws: np.ndarray  # (B, E) epoch ids drawn
    failed: list[tuple[int, str]]
    seed: int

    @property
    def B(self) -> int:
        return self.replicates.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return np.all(np.isfinite(self.replicates), axis=1)

    @property
    def n_failed(self) -> int:
        return len(self.failed)

    @property
    def sd_se(self) -> np.ndarray:
        r = self.replicates[self.ok]
        return r.std(axis=0, ddof=1) if r.shape[0] > 1 else np.full(len(self.names), np.nan)

    def percentile_ci(self, level: float = 0.95) -> np.ndarray:
        r = self.replicates[self.ok]
        a = (1 - level) / 2
        return np.quantile(r, [a, 1 - a], axis=0).T

    def percentile_se(self, level: float = 0.95) -> np.ndarray:
        """Percentile interval width rescaled to a normal-equivalent SE."""
        ci = self.percentile_ci(level)
        return (ci[:, 1] - ci[:, 0]) / (2 * stats.norm.ppf(0.5 + level / 2))

    def se_of(self, name: str) -> float:
        return float(self.sd_se[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        ci = self.percentile_ci()
        return pd.DataFrame(
            {
                "name": self.names,
                "estimate": self.point,
                "boot_se": self.sd_se,
                "pct_se": self.percentile_se(),
                "ci_lo": ci[:, 0],
                "ci_hi": ci[:, 1],
            }
        )


def epoch_bootstrap(frame: pd.DataFrame, config=None, B: int = 200, seed: int = 0, n_jobs: int = 1) -> BootstrapResult:
    """Resample whole epochs and re-estimate both stages.

    Parameters
    ----------
    frame : DataFrame
        Transaction rows with percentiles attached.
    config : TwoStageConfig, optional
    B : int
        Number of replicates.
    seed : int
        Replicate ``b`` draws from ``SeedSequence([seed, b])``, so results do
        not depend on scheduling.
    n_jobs : int
        Replicates run concurrently on this many threads.

    Returns
    -------
    BootstrapResult
        Replicates whose fit raises (rank conditions, too few epochs per
        fold) are flagged and left as NaN rows.
    """
    from ..estimate import TwoStageConfig, fit_two_stage

    if B < 1:
        raise ValueError("B must be >= 1")
    cfg = config if config is not None else TwoStageConfig()
    epoch_ids = np.unique(frame["epoch_id"].to_numpy(dtype=np.int64))
    if epoch_ids.size < 2:
        raise ValueError("bootstrap needs at least 2 distinct epochs")
    base = fit_two_stage(frame, cfg).fee
    names = list(base.names)
    draws = np.stack(
        [np.random.default_rng(np.random.SeedSequence([seed, b])).choice(epoch_ids, epoch_ids.size) for b in range(B)]
    )

    def one(b: int):
        try:
            fit = fit_two_stage(resample_epochs(frame, draws[b]), cfg).fee
        except (ValueError, np.linalg.LinAlgError) as exc:
            return b, None, str(exc)
        got = dict(zip(fit.names, fit.coef))
        missing = [n for n in names if n not in got]
        if missing:
            return b, None, f"regressors dropped: {missing}"
        return b, np.array([got[n] for n in names]), ""

    reps = np.full((B, len(names)), np.nan)
    failed = []
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]
    for b, coef, msg in results:
        if coef is None:
            failed.append((b, msg))
        else:
            reps[b] = coef
    if failed:
        logger.warning("%d of %d bootstrap replicates failed", len(failed), B)
    return BootstrapResult(names, base.coef.copy(), reps, draws, failed, seed)
