from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from feemarket.core import Snapshot, TxRecord

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def make_tx(tx_id: str, fee: int = 100, vsize: int = 100, entry: float = 0.0, **kw) -> TxRecord:
    kw.setdefault("weight_wu", 4 * vsize)
    return TxRecord(tx_id=tx_id, fee_sats=fee, vsize_vb=vsize, entry_time=entry, **kw)


def make_snapshots(t_end: float, dt: float = 60.0, start: float = 0.0) -> list[Snapshot]:
    ts = np.arange(start, t_end + dt, dt)
    return [Snapshot(float(t), 1_000_000 + int(t), 3000, 800_000 + int(t // 600), float(t % 600), 0.5) for t in ts]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
