"""Small synthetic frames for the fee-stage and diagnostics tests."""
from __future__ import annotations

import numpy as np
import pandas as pd


def fee_frame(n_epochs=6, n=40, seed=0, slope_coef=1.0, imp_effect=None, noise=0.3, sizes=None):
    rng = np.random.default_rng(seed)
    sizes = np.full(n_epochs, n) if sizes is None else np.asarray(sizes)
    e = np.repeat(np.arange(n_epochs), sizes)
    N = e.size
    f = pd.DataFrame(
        {
            "tx_id": [f"t{i}" for i in range(N)],
            "epoch_id": e,
            "log_slope": rng.normal(size=N),
            "rbf": (rng.random(N) < 0.3).astype(float),
            "cpfp": (rng.random(N) < 0.2).astype(float),
            "total_output_sats": rng.integers(1000, 10**7, N).astype(float),
            "n_inputs": rng.integers(1, 6, N).astype(float),
            "n_outputs": rng.integers(1, 4, N).astype(float),
            "has_op_return": (rng.random(N) < 0.2).astype(float),
            "has_inscription": (rng.random(N) < 0.2).astype(float),
            "weight_wu": rng.integers(400, 4000, N).astype(float),
            "blockspace_util": np.clip(rng.uniform(0.3, 0.9, n_epochs)[e] + 0.05 * rng.normal(size=N), 0, 1),
            "secs_since_last_block": rng.uniform(0, 1200, N),
            "mempool_bytes": rng.lognormal(16, 0.3, N),
            "impatience": 1.0 / (rng.integers(1, 60, N) + 1.0),
        }
    )
    log_rate = 6.0 + slope_coef * f["log_slope"] + 0.1 * f["rbf"] + rng.normal(0.0, 0.4, n_epochs)[e]
    if imp_effect is not None:
        log_rate = log_rate + imp_effect(f["impatience"].to_numpy())
    log_rate = log_rate + noise * rng.normal(size=N)
    f["fee_rate"] = np.exp(log_rate)
    return f
