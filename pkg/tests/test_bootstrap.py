from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from feemarket.delay.stage import ForestConfig
from feemarket.estimate import TwoStageConfig, fit_two_stage
from feemarket.fee.bootstrap import epoch_bootstrap, resample_epochs
from feemarket.sim.structural import RecoveryConfig, generate_recovery

CFG = TwoStageConfig(forest=ForestConfig(n_trees=5, max_depth=8, min_leaf=20, n_folds=2, n_jobs=1))


@pytest.fixture(scope="module")
def frame():
    return generate_recovery(RecoveryConfig(n_epochs=8, n_per_epoch=150, seed=3)).dataset.to_frame()


def test_identity_draw_reproduces_frame(frame):
    out = resample_epochs(frame, np.unique(frame["epoch_id"]))
    pd.testing.assert_frame_equal(out.drop(columns="source_epoch"), frame.reset_index(drop=True))
    assert np.array_equal(out["source_epoch"], out["epoch_id"])


def test_identity_draw_reproduces_point_estimates(frame):
    point = fit_two_stage(frame, CFG).fee
    again = fit_two_stage(resample_epochs(frame, np.unique(frame["epoch_id"])[::-1]), CFG).fee
    assert again.names == point.names
    assert np.array_equal(again.coef, point.coef)


def test_duplicates_get_fresh_ids(frame):
    out = resample_epochs(frame, [2, 2, 5, 2])
    assert out["epoch_id"].nunique() == 4
    sizes = out.groupby("epoch_id").size()
    assert set(sizes) == {150}
    top = int(frame["epoch_id"].max())
    new = sorted(set(out["epoch_id"]) - {2, 5})
    assert new == [top + 1, top + 2]
    assert out["tx_id"].is_unique
    assert set(out.loc[out["epoch_id"] > top, "source_epoch"]) == {2}
    assert out["tx_id"].str.endswith("#2").sum() == 150
    with pytest.raises(KeyError):
        resample_epochs(frame, [99])


def test_bootstrap_deterministic(frame):
    a = epoch_bootstrap(frame, CFG, B=2, seed=11)
    b = epoch_bootstrap(frame, CFG, B=2, seed=11, n_jobs=2)
    assert np.array_equal(a.draws, b.draws)
    assert np.array_equal(a.replicates, b.replicates, equal_nan=True)
    assert a.B == 2 and a.replicates.shape == (2, len(a.names))
    c = epoch_bootstrap(frame, CFG, B=2, seed=12)
    assert not np.array_equal(a.draws, c.draws)


def test_bootstrap_result_summaries(frame):
    res = epoch_bootstrap(frame, CFG, B=6, seed=1)
    assert res.n_failed == len(res.failed) == int((~res.ok).sum())
    t = res.table()
    assert list(t["name"]) == res.names
    ci = res.percentile_ci()
    assert np.all(ci[:, 0] <= ci[:, 1])
    assert res.se_of("log_slope") == pytest.approx(res.sd_se[res.names.index("log_slope")])


def test_bootstrap_errors(frame):
    with pytest.raises(ValueError):
        epoch_bootstrap(frame, CFG, B=0)
    with pytest.raises(ValueError):
        epoch_bootstrap(frame[frame["epoch_id"] == 0], CFG, B=1)


def test_failed_replicates_flagged(frame):
    # 8 folds over 8 epochs: any draw that repeats an epoch cannot be cross-fitted
    cfg = TwoStageConfig(forest=ForestConfig(n_trees=2, max_depth=4, min_leaf=20, n_folds=8, n_jobs=1))
    res = epoch_bootstrap(frame, cfg, B=3, seed=0)
    assert res.n_failed == 3
    assert all(np.isnan(res.replicates[b]).all() for b, _ in res.failed)
    assert all("n_folds" in msg for _, msg in res.failed)
