"""Shared data model: transaction records, epochs, priority ranks.

Everything here is a pure transformation of its inputs. Records are frozen
dataclasses; bulk numerical work downstream goes through
:meth:`Dataset.to_frame`.
"""
from __future__ import annotations

import dataclasses
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from graphlib import CycleError, TopologicalSorter

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

EPOCH_SECONDS = 1800.0
DEFAULT_EPS_RESP = 1.0
DEFAULT_MAX_GAP = 300.0

STATE_FIELDS = ("blockspace_util", "mempool_bytes", "mempool_tx_count", "secs_since_last_block")


@dataclass(frozen=True, slots=True)
class TxRecord:
    """One transaction, or one collapsed CPFP package.

    The ``blockspace_util`` .. ``secs_since_last_block`` fields hold the
    mempool snapshot in force when the transaction entered; they are filled
    by :func:`assign_epochs` and are ``None`` on raw records.
    """

    tx_id: str
    fee_sats: int
    weight_wu: int
    vsize_vb: int
    entry_time: float
    confirm_time: float | None = None
    confirm_height: int | None = None
    wait_blocks: int | None = None
    rbf: bool = False
    cpfp_package: bool = False
    members: tuple[str, ...] = ()
    n_inputs: int = 1
    n_outputs: int = 1
    total_output_sats: int = 0
    has_op_return: bool = False
    has_inscription: bool = False
    respend_blocks: float | None = None
    impatience: float | None = None
    epoch_id: int | None = None
    blockspace_util: float | None = None
    mempool_bytes: float | None = None
    mempool_tx_count: float | None = None
    secs_since_last_block: float | None = None
    state_imputed: bool = False
    weight_corrected: bool = False

    def __post_init__(self):
        if self.fee_sats < 0:
            raise ValueError(f"{self.tx_id}: negative fee")
        if self.vsize_vb <= 0 or self.weight_wu <= 0:
            raise ValueError(f"{self.tx_id}: size must be positive")
        if not self.vsize_vb <= self.weight_wu <= 4 * self.vsize_vb:
            raise ValueError(
                f"{self.tx_id}: weight {self.weight_wu} outside [vsize, 4*vsize] for vsize {self.vsize_vb}"
            )
        if self.confirm_time is not None and self.confirm_time < self.entry_time:
            raise ValueError(f"{self.tx_id}: confirmed before entry")
        if (self.wait_blocks is None) != (self.confirm_height is None):
            raise ValueError(f"{self.tx_id}: wait_blocks and confirm_height must be set together")
        if (self.impatience is None) != (self.respend_blocks is None):
            raise ValueError(f"{self.tx_id}: impatience requires respend_blocks")
        if self.n_inputs < 1 or self.n_outputs < 1 or self.total_output_sats < 0:
            raise ValueError(f"{self.tx_id}: bad input/output counts")

    @property
    def fee_rate(self) -> Fraction:
        """Fee per virtual byte, kept exact."""
        return Fraction(self.fee_sats, self.vsize_vb)

    @property
    def wait_seconds(self) -> float | None:
        if self.confirm_time is None:
            return None
        return self.confirm_time - self.entry_time


def impatience_from_respend(respend_blocks: float | None, eps_resp: float = DEFAULT_EPS_RESP) -> float | None:
    if respend_blocks is None:
        return None
    if respend_blocks <= 0:
        raise ValueError("respend_blocks must be positive")
    return 1.0 / (respend_blocks + eps_resp)


def check_impatience(tx: TxRecord, eps_resp: float = DEFAULT_EPS_RESP) -> bool:
    return tx.impatience == impatience_from_respend(tx.respend_blocks, eps_resp)


@dataclass(frozen=True, slots=True)
class Snapshot:
    """Periodic mempool observation."""

    ts: float
    mempool_bytes: int
    tx_count: int
    block_height: int
    secs_since_last_block: float
    blockspace_util: float

    def __post_init__(self):
        if not 0.0 <= self.blockspace_util <= 1.0:
            raise ValueError(f"blockspace_util {self.blockspace_util} outside [0, 1]")
        if self.mempool_bytes < 0 or self.tx_count < 0 or self.secs_since_last_block < 0:
            raise ValueError("snapshot counts must be nonnegative")


@dataclass(frozen=True, slots=True)
class EpochState:
    epoch_id: int
    window_start: float
    window_end: float
    n_tx: int
    congestion_wu: int | None = None
    blockspace_util: float | None = None
    mempool_bytes: int | None = None
    mempool_tx_count: int | None = None
    secs_since_last_block: float | None = None
    n_snapshots: int = 0
    imputed: bool = False

    @property
    def has_state(self) -> bool:
        return self.blockspace_util is not None


@dataclass(frozen=True, slots=True)
class RankedTx:
    tx_id: str
    percentile: Fraction


# -- priority ranks ----------------------------------------------------------

def tie_aware_percentile(fee_rates: Sequence) -> list[Fraction]:
    """Midpoint-ECDF rank of each rate within the set, as exact fractions.

    ``p_i = (#{r_j < r_i} + #{r_j == r_i} / 2) / N``. Floats are converted
    to their exact rational value before comparison.
    """
    rates = [Fraction(r) for r in fee_rates]
    n = len(rates)
    if n == 0:
        raise ValueError("empty ranking set")
    if any(r < 0 for r in rates):
        raise ValueError("fee rates must be nonnegative")
    counts: dict[Fraction, int] = {}
    for r in rates:
        counts[r] = counts.get(r, 0) + 1
    below = 0
    mid: dict[Fraction, Fraction] = {}
    for r in sorted(counts):
        mid[r] = (below + Fraction(counts[r], 2)) / n
        below += counts[r]
    return [mid[r] for r in rates]


def percentile_array(fee_rates) -> np.ndarray:
    """Float version of :func:`tie_aware_percentile` for large arrays."""
    r = np.asarray(fee_rates, dtype=float)
    if r.size == 0:
        raise ValueError("empty ranking set")
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise ValueError("fee rates must be finite and nonnegative")
    return _midrank(r)


def _midrank(r: np.ndarray) -> np.ndarray:
    _, inv, counts = np.unique(r, return_inverse=True, return_counts=True)
    below = np.cumsum(counts) - counts
    return (below[inv] + 0.5 * counts[inv]) / r.size


def epoch_percentiles(fee_rates, epoch_ids, check: bool = True) -> np.ndarray:
    """Tie-aware percentile computed separately inside each epoch.

    With ``check=False`` any finite scores may be ranked (e.g. log rates).
    """
    r = np.asarray(fee_rates, dtype=float)
    rank = percentile_array if check else _midrank
    e = np.asarray(epoch_ids)
    out = np.empty(r.size)
    order = np.argsort(e, kind="stable")
    bounds = np.flatnonzero(np.diff(e[order])) + 1
    for idx in np.split(order, bounds):
        if idx.size:
            out[idx] = rank(r[idx])
    return out


def rank_epochs(txs: Sequence[TxRecord]) -> list[RankedTx]:
    """Exact per-epoch ranks for records that already carry an epoch id."""
    groups: dict[int, list[int]] = {}
    for i, tx in enumerate(txs):
        if tx.epoch_id is None:
            raise ValueError(f"{tx.tx_id}: no epoch assigned")
        groups.setdefault(tx.epoch_id, []).append(i)
    out: list[RankedTx | None] = [None] * len(txs)
    for members in groups.values():
        ps = tie_aware_percentile([txs[i].fee_rate for i in members])
        for i, p in zip(members, ps):
            out[i] = RankedTx(txs[i].tx_id, p)
    return out  # type: ignore[return-value]


# -- epochs ------------------------------------------------------------------

@dataclass(frozen=True)
class EpochAssignment:
    txs: tuple[TxRecord, ...]
    epochs: tuple[EpochState, ...]
    n_dropped: int = 0
    n_imputed: int = 0
    dropped_ids: tuple[str, ...] = ()

    def __iter__(self):
        # allows ``txs, epochs = assign_epochs(...)``
        return iter((self.txs, self.epochs))


def _nearest_within(ts: np.ndarray, t: np.ndarray, max_gap: float) -> tuple[np.ndarray, np.ndarray]:
    """Index of the as-of (preceding) snapshot, falling back to the nearest one.

    Returns ``(index, imputed)``; index is -1 where nothing lies within
    ``max_gap``.
    """
    prev = np.searchsorted(ts, t, side="right") - 1
    idx = np.full(t.shape, -1, dtype=np.int64)
    imputed = np.zeros(t.shape, dtype=bool)
    if ts.size == 0:
        return idx, imputed
    ok = (prev >= 0) & (t - ts[np.clip(prev, 0, None)] <= max_gap)
    idx[ok] = prev[ok]
    nxt = np.clip(prev + 1, 0, ts.size - 1)
    fallback = ~ok & (prev + 1 < ts.size) & (ts[nxt] - t <= max_gap)
    idx[fallback] = nxt[fallback]
    imputed[fallback] = True
    return idx, imputed


def snapshot_index(snapshots: Sequence[Snapshot], times, max_gap: float = DEFAULT_MAX_GAP):
    ts = np.array([s.ts for s in snapshots], dtype=float)
    if np.any(np.diff(ts) < 0):
        raise ValueError("snapshots must be sorted by timestamp")
    return _nearest_within(ts, np.asarray(times, dtype=float), max_gap)


def assign_epochs(
    txs: Sequence[TxRecord],
    snapshots: Sequence[Snapshot],
    window_len: float = EPOCH_SECONDS,
    max_gap: float = DEFAULT_MAX_GAP,
) -> EpochAssignment:
    """Bucket transactions into consecutive windows and attach mempool state.

    Windows are half-open ``[t0 + k*window_len, t0 + (k+1)*window_len)``
    anchored at the earliest entry time. Each record gets the as-of
    snapshot at its entry time; epoch aggregates are means over snapshots
    inside the window. Records (or whole epochs) with no snapshot within
    ``max_gap`` are dropped and counted.
    """
    if window_len <= 0:
        raise ValueError("window_len must be positive")
    if not txs:
        return EpochAssignment((), ())
    snaps = sorted(snapshots, key=lambda s: s.ts)
    entry = np.array([tx.entry_time for tx in txs], dtype=float)
    t0 = float(entry.min())
    k = np.floor((entry - t0) / window_len).astype(np.int64)
    n_epochs = int(k.max()) + 1

    ts = np.array([s.ts for s in snaps], dtype=float)
    cols = {
        "blockspace_util": np.array([s.blockspace_util for s in snaps], dtype=float),
        "mempool_bytes": np.array([s.mempool_bytes for s in snaps], dtype=float),
        "mempool_tx_count": np.array([s.tx_count for s in snaps], dtype=float),
        "secs_since_last_block": np.array([s.secs_since_last_block for s in snaps], dtype=float),
    }

    # epoch-level state
    starts = t0 + window_len * np.arange(n_epochs)
    ends = starts + window_len
    lo = np.searchsorted(ts, starts, side="left")
    hi = np.searchsorted(ts, ends, side="left")
    epoch_state: list[dict | None] = []
    for e in range(n_epochs):
        if hi[e] > lo[e]:
            sl = slice(lo[e], hi[e])
            epoch_state.append({c: float(v[sl].mean()) for c, v in cols.items()} | {"n": int(hi[e] - lo[e]), "imputed": False})
            continue
        # nearest snapshot to the window, if close enough
        best = None
        if lo[e] > 0 and starts[e] - ts[lo[e] - 1] <= max_gap:
            best = lo[e] - 1
        if hi[e] < ts.size and ts[hi[e]] - ends[e] <= max_gap:
            if best is None or ts[hi[e]] - ends[e] < starts[e] - ts[best]:
                best = hi[e]
        if best is None:
            epoch_state.append(None)
        else:
            epoch_state.append({c: float(v[best]) for c, v in cols.items()} | {"n": 0, "imputed": True})

    idx, imputed = _nearest_within(ts, entry, max_gap)
    keep = idx >= 0
    has_epoch_state = np.array([epoch_state[e] is not None for e in range(n_epochs)])
    keep &= has_epoch_state[k]
    dropped = [tx.tx_id for tx, ok in zip(txs, keep) if not ok]
    if dropped:
        logger.warning("dropped %d transactions with no snapshot within %.0fs", len(dropped), max_gap)

    out: list[TxRecord] = []
    counts = np.zeros(n_epochs, dtype=np.int64)
    for i, tx in enumerate(txs):
        if not keep[i]:
            continue
        j = idx[i]
        counts[k[i]] += 1
        out.append(
            dataclasses.replace(
                tx,
                epoch_id=int(k[i]),
                blockspace_util=float(cols["blockspace_util"][j]),
                mempool_bytes=float(cols["mempool_bytes"][j]),
                mempool_tx_count=float(cols["mempool_tx_count"][j]),
                secs_since_last_block=float(cols["secs_since_last_block"][j]),
                state_imputed=bool(imputed[i]),
            )
        )

    epochs = []
    for e in range(n_epochs):
        st = epoch_state[e]
        if st is None:
            epochs.append(EpochState(e, float(starts[e]), float(ends[e]), n_tx=0))
            continue
        epochs.append(
            EpochState(
                epoch_id=e,
                window_start=float(starts[e]),
                window_end=float(ends[e]),
                n_tx=int(counts[e]),
                # mempool "bytes" are virtual bytes; 4 WU per vbyte
                congestion_wu=int(round(4 * st["mempool_bytes"])),
                blockspace_util=min(1.0, max(0.0, st["blockspace_util"])),
                mempool_bytes=int(round(st["mempool_bytes"])),
                mempool_tx_count=int(round(st["mempool_tx_count"])),
                secs_since_last_block=st["secs_since_last_block"],
                n_snapshots=st["n"],
                imputed=st["imputed"],
            )
        )
    return EpochAssignment(
        tuple(out), tuple(epochs), n_dropped=len(dropped), n_imputed=int(imputed[keep].sum()), dropped_ids=tuple(dropped)
    )


# -- CPFP packages -----------------------------------------------------------

def collapse_cpfp(txs: Sequence[TxRecord], parent_links: Iterable[tuple[str, str]], eps_resp: float = DEFAULT_EPS_RESP) -> list[TxRecord]:
    """Merge each connected child/parent group into a single package record.

    The package pays the summed fee over the summed size. It enters with its
    earliest member and confirms with its latest one; RBF, OP_RETURN and
    inscription flags are OR-ed, counts and output values summed, and the
    respend horizon is the members' minimum.
    """
    by_id = {tx.tx_id: i for i, tx in enumerate(txs)}
    links = list(parent_links)
    if not links:
        return list(txs)
    graph: dict[str, set[str]] = {}
    for child, parent in links:
        for x in (child, parent):
            if x not in by_id:
                raise KeyError(f"link references unknown transaction {x!r}")
        graph.setdefault(child, set()).add(parent)
    try:
        tuple(TopologicalSorter(graph).static_order())
    except CycleError as exc:
        raise ValueError(f"cycle in parent links: {exc.args[1]}") from None

    parent_of = list(range(len(txs)))

    def find(i):
        while parent_of[i] != i:
            parent_of[i] = parent_of[parent_of[i]]
            i = parent_of[i]
        return i

    for child, parent in links:
        a, b = find(by_id[child]), find(by_id[parent])
        if a != b:
            parent_of[max(a, b)] = min(a, b)

    groups: dict[int, list[int]] = {}
    for i in range(len(txs)):
        groups.setdefault(find(i), []).append(i)

    out = []
    for i, tx in enumerate(txs):
        root = find(i)
        members = groups[root]
        if len(members) == 1:
            out.append(tx)
        elif i == root:
            out.append(_package([txs[j] for j in members], eps_resp))
    return out


def _package(members: list[TxRecord], eps_resp: float) -> TxRecord:
    first = min(members, key=lambda t: (t.entry_time, t.tx_id))
    if any(m.confirm_time is None for m in members):
        last_conf, height, wait = None, None, None
    else:
        last = max(members, key=lambda t: (t.confirm_time, t.tx_id))
        last_conf, height, wait = last.confirm_time, last.confirm_height, last.wait_blocks
    respends = [m.respend_blocks for m in members if m.respend_blocks is not None]
    respend = min(respends) if respends else None
    return dataclasses.replace(
        first,
        tx_id=f"pkg:{first.tx_id}",
        fee_sats=sum(m.fee_sats for m in members),
        vsize_vb=sum(m.vsize_vb for m in members),
        weight_wu=sum(m.weight_wu for m in members),
        confirm_time=last_conf,
        confirm_height=height,
        wait_blocks=wait,
        rbf=any(m.rbf for m in members),
        cpfp_package=True,
        members=tuple(sorted(m.tx_id for m in members)),
        n_inputs=sum(m.n_inputs for m in members),
        n_outputs=sum(m.n_outputs for m in members),
        total_output_sats=sum(m.total_output_sats for m in members),
        has_op_return=any(m.has_op_return for m in members),
        has_inscription=any(m.has_inscription for m in members),
        respend_blocks=respend,
        impatience=impatience_from_respend(respend, eps_resp),
    )


# -- weight correction -------------------------------------------------------

@dataclass(frozen=True)
class CorrectionReport:
    n_total: int
    n_matched: int
    n_rejected_rows: int
    mean_weight_delta: float
    unmatched_ids: tuple[str, ...] = ()

    @property
    def match_fraction(self) -> float:
        return self.n_matched / self.n_total if self.n_total else 0.0


def correct_weights(
    txs: Sequence[TxRecord], external: Mapping[str, tuple[int, int]]
) -> tuple[list[TxRecord], CorrectionReport]:
    """Replace node-reported sizes with witness-discounted external values.

    ``external`` maps ``tx_id -> (vsize_vb, weight_wu)``. Rows outside
    ``vsize <= weight <= 4*vsize`` are rejected and counted.
    """
    valid: dict[str, tuple[int, int]] = {}
    rejected = 0
    for tx_id, (vsize, weight) in external.items():
        if vsize <= 0 or not vsize <= weight <= 4 * vsize:
            rejected += 1
            continue
        valid[tx_id] = (int(vsize), int(weight))

    out, unmatched, deltas = [], [], []
    for tx in txs:
        row = valid.get(tx.tx_id)
        if row is None:
            unmatched.append(tx.tx_id)
            out.append(tx)
            continue
        vsize, weight = row
        deltas.append(weight - tx.weight_wu)
        out.append(dataclasses.replace(tx, vsize_vb=vsize, weight_wu=weight, weight_corrected=True))
    report = CorrectionReport(
        n_total=len(txs),
        n_matched=len(deltas),
        n_rejected_rows=rejected,
        mean_weight_delta=float(np.mean(deltas)) if deltas else 0.0,
        unmatched_ids=tuple(unmatched),
    )
    return out, report


# -- assembled dataset -------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Epoch-assigned records plus the snapshot series they were joined to."""

    txs: tuple[TxRecord, ...]
    epochs: tuple[EpochState, ...]
    snapshots: tuple[Snapshot, ...] = ()
    n_dropped: int = 0
    meta: Mapping[str, object] = field(default_factory=dict)

    @property
    def n_epochs_with_txs(self) -> int:
        return sum(1 for e in self.epochs if e.n_tx > 0)

    def to_frame(self) -> pd.DataFrame:
        """Columnar view with per-epoch tie-aware priority percentiles ``p``."""
        txs = self.txs
        f = pd.DataFrame(
            {
                "tx_id": [t.tx_id for t in txs],
                "epoch_id": np.array([t.epoch_id for t in txs], dtype=np.int64),
                "fee_sats": np.array([t.fee_sats for t in txs], dtype=np.int64),
                "vsize_vb": np.array([t.vsize_vb for t in txs], dtype=np.int64),
                "weight_wu": np.array([t.weight_wu for t in txs], dtype=np.int64),
                "entry_time": np.array([t.entry_time for t in txs], dtype=float),
                "confirm_time": np.array([np.nan if t.confirm_time is None else t.confirm_time for t in txs]),
                "wait_blocks": np.array([np.nan if t.wait_blocks is None else t.wait_blocks for t in txs]),
                "rbf": np.array([t.rbf for t in txs], dtype=float),
                "cpfp": np.array([t.cpfp_package for t in txs], dtype=float),
                "n_inputs": np.array([t.n_inputs for t in txs], dtype=float),
                "n_outputs": np.array([t.n_outputs for t in txs], dtype=float),
                "total_output_sats": np.array([t.total_output_sats for t in txs], dtype=float),
                "has_op_return": np.array([t.has_op_return for t in txs], dtype=float),
                "has_inscription": np.array([t.has_inscription for t in txs], dtype=float),
                "respend_blocks": np.array([np.nan if t.respend_blocks is None else t.respend_blocks for t in txs]),
                "impatience": np.array([np.nan if t.impatience is None else t.impatience for t in txs]),
            }
        )
        for c in STATE_FIELDS:
            f[c] = np.array([np.nan if getattr(t, c) is None else getattr(t, c) for t in txs], dtype=float)
        f["fee_rate"] = f["fee_sats"] / f["vsize_vb"]
        f["wait_seconds"] = f["confirm_time"] - f["entry_time"]
        if len(f):
            f["p"] = epoch_percentiles(f["fee_rate"].to_numpy(), f["epoch_id"].to_numpy())
        else:
            f["p"] = np.array([], dtype=float)
        return f


def assemble(
    txs: Sequence[TxRecord],
    snapshots: Sequence[Snapshot],
    window_len: float = EPOCH_SECONDS,
    max_gap: float = DEFAULT_MAX_GAP,
    meta: Mapping[str, object] | None = None,
) -> Dataset:
    a = assign_epochs(txs, snapshots, window_len, max_gap)
    return Dataset(a.txs, a.epochs, tuple(sorted(snapshots, key=lambda s: s.ts)), a.n_dropped, dict(meta or {}))


def log_safe(x) -> np.ndarray:
    """Natural log that maps nonpositive inputs to log of the smallest positive float."""
    x = np.asarray(x, dtype=float)
    return np.log(np.maximum(x, np.finfo(float).tiny))

