"""Text formats for transactions, snapshots, CPFP links and external weights.

Transactions are JSON lines; everything else is CSV with a header row.
Floats are written in shortest round-trip form, so export followed by
ingest reproduces a dataset exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_EPS_RESP,
    DEFAULT_MAX_GAP,
    EPOCH_SECONDS,
    CorrectionReport,
    Dataset,
    Snapshot,
    TxRecord,
    assign_epochs,
    collapse_cpfp,
    correct_weights,
    impatience_from_respend,
)

logger = logging.getLogger(__name__)

TX_FIELDS = (
    "tx_id",
    "entry_ts",
    "confirm_ts",
    "confirm_height",
    "fee_sats",
    "weight_wu",
    "vsize_vb",
    "rbf",
    "n_inputs",
    "n_outputs",
    "total_output_sats",
    "op_return",
    "inscription",
    "respend_blocks",
)
# may be null
NULLABLE = frozenset({"confirm_ts", "confirm_height", "respend_blocks"})
# written when known; derived from snapshots otherwise
OPTIONAL = ("wait_blocks",)
SNAPSHOT_FIELDS = ("ts", "mempool_bytes", "tx_count", "block_height", "secs_since_last_block", "blockspace_util")


class IngestError(ValueError):
    """Ingestion aborted; ``category`` is a short machine-readable tag."""

    def __init__(self, message: str, category: str = "ingest"):
        super().__init__(message)
        self.category = category


@dataclass(frozen=True)
class LineError:
    file: str
    line: int
    message: str


# -- writers -------------------------------------------------------------------

def tx_to_json(tx: TxRecord) -> dict:
    d = {
        "tx_id": tx.tx_id,
        "entry_ts": tx.entry_time,
        "confirm_ts": tx.confirm_time,
        "confirm_height": tx.confirm_height,
        "fee_sats": tx.fee_sats,
        "weight_wu": tx.weight_wu,
        "vsize_vb": tx.vsize_vb,
        "rbf": tx.rbf,
        "n_inputs": tx.n_inputs,
        "n_outputs": tx.n_outputs,
        "total_output_sats": tx.total_output_sats,
        "op_return": tx.has_op_return,
        "inscription": tx.has_inscription,
        "respend_blocks": tx.respend_blocks,
    }
    if tx.wait_blocks is not None:
        d["wait_blocks"] = tx.wait_blocks
    return d


def write_txs(path, txs) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for tx in txs:
            fh.write(json.dumps(tx_to_json(tx), separators=(",", ":")) + "\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_snapshots(path, snapshots) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNAPSHOT_FIELDS)
        for s in snapshots:
            w.writerow(
                [_fmt(float(s.ts)), s.mempool_bytes, s.tx_count, s.block_height, _fmt(float(s.secs_since_last_block)), _fmt(float(s.blockspace_util))]
            )
    return path


def write_links(path, links) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("child_id", "parent_id"))
        w.writerows(links)
    return path


def write_weights(path, external) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tx_id", "vsize_vb", "weight_wu"))
        for k in sorted(external):
            w.writerow((k, *external[k]))
    return path


def write_truth(directory, sim) -> dict[str, Path]:
    """Ground-truth sidecar for a simulated run: agents, and the planned schedule if any."""
    directory = Path(directory)
    out = {"agents": directory / "truth_agents.csv"}
    sim.truth_frame().to_csv(out["agents"], index=False, lineterminator="\n", float_format="%.17g")
    if sim.planned is not None:
        pl = sim.planned
        path = directory / "truth_schedule.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("q", "wait_blocks", "gradient", "fee_usd"))
            fees = pl.fee.b
            for row in zip(pl.q, pl.wait_blocks, pl.gradient, np.interp(pl.q, pl.fee.p, fees)):
                w.writerow([_fmt(float(x)) for x in row])
        out["schedule"] = path
    return out


def export_simulation(directory, sim) -> dict[str, Path]:
    """Write a simulated run in the ingest formats plus its truth sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "txs": write_txs(directory / "txs.jsonl", sim.txs),
        "snapshots": write_snapshots(directory / "snapshots.csv", sim.snapshots),
    }
    paths.update(write_truth(directory, sim))
    return paths


# -- readers -------------------------------------------------------------------

def _as_bool(v, name):
    if isinstance(v, bool):
        return v
    if v in (0, 1):
        return bool(v)
    raise ValueError(f"field {name!r} must be boolean")


def _as_int(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"field {name!r} must be an integer")
    return int(v)


def _as_float(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ValueError(f"field {name!r} must be a finite number")
    return float(v)


def parse_tx(obj: dict, eps_resp: float = DEFAULT_EPS_RESP) -> tuple[TxRecord, int | None]:
    """Build a record from one parsed JSON object.

    Returns the record and the explicit ``wait_blocks`` (``None`` when it
    must be derived).
    """
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    missing = [f for f in TX_FIELDS if f not in obj]
    if missing:
        raise ValueError(f"missing required field(s) {missing}")
    for f in TX_FIELDS:
        if obj[f] is None and f not in NULLABLE:
            raise ValueError(f"field {f!r} may not be null")
    if not isinstance(obj["tx_id"], str) or not obj["tx_id"]:
        raise ValueError("field 'tx_id' must be a non-empty string")
    confirm_ts = None if obj["confirm_ts"] is None else _as_float(obj["confirm_ts"], "confirm_ts")
    height = None if obj["confirm_height"] is None else _as_int(obj["confirm_height"], "confirm_height")
    if (confirm_ts is None) != (height is None):
        raise ValueError("confirm_ts and confirm_height must both be set or both null")
    wait = obj.get("wait_blocks")
    wait = None if wait is None else _as_int(wait, "wait_blocks")
    respend = None if obj["respend_blocks"] is None else _as_float(obj["respend_blocks"], "respend_blocks")
    tx = TxRecord(
        tx_id=obj["tx_id"],
        fee_sats=_as_int(obj["fee_sats"], "fee_sats"),
        weight_wu=_as_int(obj["weight_wu"], "weight_wu"),
        vsize_vb=_as_int(obj["vsize_vb"], "vsize_vb"),
        entry_time=_as_float(obj["entry_ts"], "entry_ts"),
        confirm_time=confirm_ts,
        confirm_height=height,
        wait_blocks=wait if height is not None and wait is not None else (0 if height is not None else None),
        rbf=_as_bool(obj["rbf"], "rbf"),
        n_inputs=_as_int(obj["n_inputs"], "n_inputs"),
        n_outputs=_as_int(obj["n_outputs"], "n_outputs"),
        total_output_sats=_as_int(obj["total_output_sats"], "total_output_sats"),
        has_op_return=_as_bool(obj["op_return"], "op_return"),
        has_inscription=_as_bool(obj["inscription"], "inscription"),
        respend_blocks=respend,
        impatience=impatience_from_respend(respend, eps_resp),
    )
    return tx, wait


def read_txs(path, eps_resp: float = DEFAULT_EPS_RESP):
    """Parse a JSON-lines transaction file.

    Returns ``(records, explicit_wait, errors, n_lines)``; blank lines are
    skipped and not counted.
    """
    path = Path(path)
    recs, waits, errors = [], [], []
    n = 0
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            n += 1
            try:
                tx, wait = parse_tx(json.loads(line), eps_resp)
                if tx.tx_id in seen:
                    raise ValueError(f"duplicate tx_id {tx.tx_id!r}")
            except (ValueError, TypeError) as exc:
                errors.append(LineError(path.name, lineno, str(exc)))
                continue
            seen.add(tx.tx_id)
            recs.append(tx)
            waits.append(wait)
    return recs, waits, errors, n


def read_snapshots(path):
    """Parse the snapshot CSV. Returns ``(snapshots, errors)``."""
    path = Path(path)
    snaps, errors = [], []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return [], []
        if tuple(h.strip() for h in header) != SNAPSHOT_FIELDS:
            raise IngestError(f"{path.name}: expected header {','.join(SNAPSHOT_FIELDS)}", "schema")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                if len(row) != len(SNAPSHOT_FIELDS):
                    raise ValueError(f"expected {len(SNAPSHOT_FIELDS)} fields, got {len(row)}")
                ts, mb, cnt, h, since, util = row
                vals = (float(ts), int(mb), int(cnt), int(h), float(since), float(util))
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite value")
                snaps.append(Snapshot(*vals))
            except ValueError as exc:
                errors.append(LineError(path.name, lineno, str(exc)))
    return snaps, errors


def _read_pairs(path, header: tuple[str, ...]):
    path = Path(path)
    rows, errors = [], []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None:
            return [], []
        if tuple(h.strip() for h in head) != header:
            raise IngestError(f"{path.name}: expected header {','.join(header)}", "schema")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header) or not all(x.strip() for x in row):
                errors.append(LineError(path.name, lineno, f"expected {len(header)} non-empty fields"))
                continue
            rows.append((lineno, [x.strip() for x in row]))
    return rows, errors


def read_links(path):
    rows, errors = _read_pairs(path, ("child_id", "parent_id"))
    return [(c, p) for _, (c, p) in rows], errors


def read_weights(path):
    rows, errors = _read_pairs(path, ("tx_id", "vsize_vb", "weight_wu"))
    out = {}
    for lineno, (k, v, w) in rows:
        try:
            out[k] = (int(v), int(w))
        except ValueError as exc:
            errors.append(LineError(Path(path).name, lineno, str(exc)))
    return out, errors


# -- ingest --------------------------------------------------------------------

@dataclass
class IngestReport:
    records_in: int
    records_kept: int
    records_dropped: int
    n_malformed: int
    n_no_state: int
    n_packages: int
    errors: list[LineError] = field(default_factory=list)
    weights: CorrectionReport | None = None

    def to_dict(self) -> dict:
        return {
            "records_in": self.records_in,
            "records_kept": self.records_kept,
            "records_dropped": self.records_dropped,
            "n_malformed": self.n_malformed,
            "n_no_state": self.n_no_state,
            "n_packages": self.n_packages,
            "errors": [f"{e.file}:{e.line}: {e.message}" for e in self.errors],
            "weights": None
            if self.weights is None
            else {
                "n_total": self.weights.n_total,
                "n_matched": self.weights.n_matched,
                "n_rejected_rows": self.weights.n_rejected_rows,
                "mean_weight_delta": self.weights.mean_weight_delta,
            },
        }


@dataclass
class IngestResult:
    dataset: Dataset
    report: IngestReport


def _derive_wait(txs, explicit, snapshots) -> list[TxRecord]:
    """Fill ``wait_blocks`` from the chain tip seen at entry when it was not given."""
    import dataclasses

    if all(w is not None or tx.confirm_height is None for tx, w in zip(txs, explicit)):
        return [tx if w is None else dataclasses.replace(tx, wait_blocks=w) for tx, w in zip(txs, explicit)]
    snaps = sorted(snapshots, key=lambda s: s.ts)
    ts = np.array([s.ts for s in snaps])
    heights = np.array([s.block_height for s in snaps])
    out = []
    for tx, w in zip(txs, explicit):
        if tx.confirm_height is None:
            out.append(tx)
            continue
        if w is None:
            k = int(np.searchsorted(ts, tx.entry_time, side="right")) - 1
            tip = int(heights[k]) if k >= 0 else int(heights[0]) if heights.size else tx.confirm_height
            w = max(0, tx.confirm_height - tip)
        out.append(dataclasses.replace(tx, wait_blocks=w))
    return out


def ingest(
    tx_file,
    snapshot_file,
    links_file=None,
    weights_file=None,
    window_s: float = EPOCH_SECONDS,
    max_gap: float = DEFAULT_MAX_GAP,
    eps_resp: float = DEFAULT_EPS_RESP,
    max_error_fraction: float = 0.5,
) -> IngestResult:
    """Read, validate and join the input files into an epoch-assigned dataset.

    Pipeline: parse, correct weights, collapse CPFP packages, assign epochs.
    Malformed lines are counted and reported; the run aborts when they
    exceed ``max_error_fraction`` of the transaction lines.
    """
    txs, waits, errors, n_lines = read_txs(tx_file, eps_resp)
    if n_lines and len(errors) / n_lines > max_error_fraction:
        raise IngestError(
            f"{len(errors)} of {n_lines} transaction lines malformed (limit {max_error_fraction:.0%}); first: "
            f"{errors[0].file}:{errors[0].line}: {errors[0].message}",
            "malformed_input",
        )
    snaps, snap_errors = read_snapshots(snapshot_file)
    errors += snap_errors
    if not snaps:
        raise IngestError("no epoch state available: snapshot file has no valid rows", "no_state")
    txs = _derive_wait(txs, waits, snaps)

    wrep = None
    if weights_file is not None:
        external, w_err = read_weights(weights_file)
        errors += w_err
        txs, wrep = correct_weights(txs, external)
    n_packages = 0
    if links_file is not None:
        links, l_err = read_links(links_file)
        errors += l_err
        try:
            txs = collapse_cpfp(txs, links, eps_resp)
        except (KeyError, ValueError) as exc:
            raise IngestError(f"CPFP links: {exc}", "links") from exc
        n_packages = sum(1 for t in txs if t.cpfp_package)

    a = assign_epochs(txs, snaps, window_s, max_gap)
    if not a.txs:
        raise IngestError("no epoch state available: no transaction lies within reach of a snapshot", "no_state")
    dropped_ids = set(a.dropped_ids)
    n_no_state = sum(max(1, len(t.members)) for t in txs if t.tx_id in dropped_ids)
    kept = sum(max(1, len(t.members)) for t in a.txs)
    rep = IngestReport(
        records_in=n_lines,
        records_kept=kept,
        records_dropped=n_lines - kept,
        n_malformed=n_lines - len(waits),
        n_no_state=n_no_state,
        n_packages=n_packages,
        errors=errors,
        weights=wrep,
    )
    if rep.records_dropped != rep.n_malformed + rep.n_no_state:
        raise AssertionError("ingest record accounting is inconsistent")
    for e in errors:
        logger.warning("%s:%d: %s", e.file, e.line, e.message)
    ds = Dataset(a.txs, a.epochs, tuple(sorted(snaps, key=lambda s: s.ts)), a.n_dropped, {"source": "ingest"})
    return IngestResult(ds, rep)
