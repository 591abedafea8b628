"""Command-line entry point: ``feemarket <subcommand> ...``.

Exit status is 0 on success. Failures print one JSON line to stderr with
an ``error`` category and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .core import DEFAULT_EPS_RESP, DEFAULT_MAX_GAP, EPOCH_SECONDS, epoch_percentiles
from .delay.stage import ForestConfig, SlopeConfig, _eval_points, _interp_rows, fit_delay, priority_grid
from .fee.model import SLOPE, FeeSpec, coefficient_table, counterfactual, fit_fee_model
from .io import IngestError, export_simulation, ingest, write_snapshots, write_txs
from .pipeline import (
    PipelineError,
    RunConfig,
    delay_summary,
    fee_fit_dict,
    fee_plot_data,
    read_frame,
    run_diagnostics,
    run_pipeline,
    schedules_frame,
    slopes_frame,
    write_csv,
    write_json,
)

EXIT_CODES = {"usage": 2, "no_state": 3, "malformed_input": 3, "schema": 3, "links": 3, "ingest": 3, "stage_failed": 4, "invalid": 5, "check_failed": 6}


class CliError(Exception):
    def __init__(self, message: str, category: str = "invalid"):
        super().__init__(message)
        self.category = category


# -- shared option groups ----------------------------------------------------

def _add_forest(p: argparse.ArgumentParser) -> None:
    d = ForestConfig()
    g = p.add_argument_group("delay forest")
    g.add_argument("--trees", type=int, default=d.n_trees)
    g.add_argument("--max-depth", type=int, default=d.max_depth)
    g.add_argument("--min-leaf", type=int, default=d.min_leaf)
    g.add_argument("--feature-subsample", type=float, default=d.feature_subsample)
    g.add_argument("--no-bagging", action="store_true", help="grow every tree on the full training set")
    g.add_argument("--folds", type=int, default=d.n_folds)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--jobs", type=int, default=None, help="threads for tree fitting (default: all cores)")


def _add_slopes(p: argparse.ArgumentParser) -> None:
    d = SlopeConfig()
    g = p.add_argument_group("slopes")
    g.add_argument("--grid-m", type=int, default=d.grid_m)
    g.add_argument("--delta", type=float, default=d.delta)
    g.add_argument("--trim", type=float, default=d.trim)
    g.add_argument("--slope-floor", type=float, default=d.slope_floor)


def _add_fee(p: argparse.ArgumentParser) -> None:
    d = FeeSpec()
    g = p.add_argument_group("fee model")
    g.add_argument("--spline", action="store_true", help="add the monotone impatience spline")
    g.add_argument("--knot-probs", type=float, nargs="+", default=list(d.knot_probs))
    g.add_argument("--fee-floor", type=float, default=d.fee_floor, help="minimum fee rate in sat/vB")
    g.add_argument("--no-slope", action="store_true", help="omit the log slope regressor")


def _forest_cfg(a) -> ForestConfig:
    return ForestConfig(
        n_trees=a.trees,
        max_depth=a.max_depth,
        min_leaf=a.min_leaf,
        feature_subsample=a.feature_subsample,
        bootstrap=not a.no_bagging,
        seed=a.seed,
        n_folds=a.folds,
        n_jobs=a.jobs,
    )


def _slope_cfg(a) -> SlopeConfig:
    return SlopeConfig(grid_m=a.grid_m, delta=a.delta, trim=a.trim, slope_floor=a.slope_floor)


def _fee_spec(a) -> FeeSpec:
    return FeeSpec(include_slope=not a.no_slope, spline=a.spline, knot_probs=tuple(a.knot_probs), fee_floor=a.fee_floor)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _with_slopes(dataset, slopes) -> pd.DataFrame:
    frame = read_frame(dataset)
    sl = read_frame(slopes)
    if len(sl) != len(frame) or not np.array_equal(sl["tx_id"].to_numpy(), frame["tx_id"].to_numpy()):
        raise CliError("slopes file rows do not match the dataset")
    frame[SLOPE] = sl[SLOPE].to_numpy()
    return frame


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(a) -> dict:
    out = _out_dir(a.out)
    if a.generator == "queue":
        from .sim.queue import Equilibrium, SimConfig, simulate_queue

        cfg = SimConfig.from_dict(json.loads(Path(a.config).read_text())) if a.config else SimConfig()
        cfg = replace(cfg, seed=a.seed, **({"horizon": a.horizon} if a.horizon else {}))
        sim = simulate_queue(cfg, Equilibrium())
        paths = export_simulation(out, sim)
        write_json(cfg.to_dict(), out / "sim_config.json")
        return {"n_txs": len(sim.txs), "n_snapshots": len(sim.snapshots), **{k: str(v) for k, v in paths.items()}}
    from .sim.structural import RecoveryConfig, generate_recovery

    cfg = RecoveryConfig(n_epochs=a.epochs, n_per_epoch=a.per_epoch, seed=a.seed)
    r = generate_recovery(cfg)
    write_txs(out / "txs.jsonl", r.dataset.txs)
    write_snapshots(out / "snapshots.csv", r.dataset.snapshots)
    truth = pd.DataFrame({"tx_id": [t.tx_id for t in r.dataset.txs], "true_p": r.true_p, "true_log_slope": r.true_log_slope})
    write_csv(truth, out / "truth_slopes.csv")
    write_csv(pd.DataFrame({"epoch": np.arange(cfg.n_epochs), "z": r.z, "xi": r.xi}), out / "truth_epochs.csv")
    write_json(cfg.to_dict(), out / "sim_config.json")
    return {"n_txs": len(r.dataset.txs), "txs": str(out / "txs.jsonl"), "snapshots": str(out / "snapshots.csv")}


def cmd_ingest(a) -> dict:
    out = _out_dir(a.out)
    res = ingest(a.txs, a.snapshots, a.links, a.weights, a.window, a.max_gap, a.eps_resp, a.max_error_fraction)
    frame = res.dataset.to_frame()
    write_csv(frame, out / "dataset.csv")
    write_csv(pd.DataFrame([asdict(e) for e in res.dataset.epochs]), out / "epochs.csv")
    write_json(res.report.to_dict(), out / "ingest_report.json")
    rep = res.report
    return {"records_in": rep.records_in, "records_kept": rep.records_kept, "records_dropped": rep.records_dropped,
            "n_malformed": rep.n_malformed, "dataset": str(out / "dataset.csv")}


def cmd_rank(a) -> dict:
    frame = read_frame(a.dataset)
    frame["p"] = epoch_percentiles(frame["fee_sats"].to_numpy() / frame["vsize_vb"].to_numpy(), frame["epoch_id"].to_numpy())
    write_csv(frame[["tx_id", "epoch_id", "fee_rate", "p"]], a.out)
    return {"n": len(frame), "ranks": str(a.out)}


def cmd_fit_delay(a) -> dict:
    out = _out_dir(a.out)
    fit = fit_delay(read_frame(a.dataset), _forest_cfg(a), _slope_cfg(a))
    write_json(delay_summary(fit), out / "delay_summary.json")
    write_csv(schedules_frame(fit), out / "schedules.csv")
    write_csv(slopes_frame(fit), out / "slopes.csv")
    return {"oos_r2": fit.crossfit.r2, "trivial_share": fit.regimes.trivial_share, "slopes": str(out / "slopes.csv")}


def cmd_slopes(a) -> dict:
    """Recompute slopes from saved schedules with new difference settings."""
    frame = read_frame(a.dataset)
    sch = pd.read_csv(a.schedules, float_precision="round_trip")
    table = sch.drop(columns=["epoch_id", "fold", "trivial"]).to_numpy(dtype=float)
    grid = priority_grid(table.shape[1])
    ids = sch["epoch_id"].to_numpy(dtype=np.int64)
    eid = frame["epoch_id"].to_numpy(dtype=np.int64)
    rows = np.searchsorted(ids, eid)
    if np.any(rows >= ids.size) or np.any(ids[np.minimum(rows, ids.size - 1)] != eid):
        raise CliError("dataset has epochs without a saved schedule")
    lo, hi = _eval_points(frame["p"].to_numpy(dtype=float), a.delta, a.trim)
    slope = np.maximum(0.0, (_interp_rows(lo, grid, table, rows) - _interp_rows(hi, grid, table, rows)) / (hi - lo))
    out = pd.DataFrame({"tx_id": frame["tx_id"], "epoch_id": eid, "p": frame["p"], "slope": slope,
                        SLOPE: np.log(np.maximum(slope, a.slope_floor))})
    write_csv(out, a.out)
    return {"n": len(out), "slopes": str(a.out)}


def cmd_fit_fee(a) -> dict:
    out = _out_dir(a.out)
    fit = fit_fee_model(_with_slopes(a.dataset, a.slopes), None, _fee_spec(a))
    table = coefficient_table(fit)
    write_csv(table, out / "coefficients.csv")
    write_json(fee_fit_dict(fit), out / "fee_fit.json")
    write_csv(fit.xi_series().reset_index(), out / "epoch_effects.csv")
    fee_plot_data(fit, out)
    if not a.quiet:
        print(table.to_string(index=False))
    return {"r2_within": fit.r2_within, "psi": fit.psi, "n_obs": fit.n_obs, "n_clusters": fit.n_clusters}


def cmd_bootstrap(a) -> dict:
    from .estimate import TwoStageConfig
    from .fee.bootstrap import epoch_bootstrap

    out = _out_dir(a.out)
    cfg = TwoStageConfig(_forest_cfg(a), _slope_cfg(a), _fee_spec(a))
    res = epoch_bootstrap(read_frame(a.dataset), cfg, a.B, a.boot_seed, a.boot_jobs)
    write_csv(res.table(), out / "bootstrap.csv")
    reps = pd.DataFrame(res.replicates, columns=res.names)
    reps.insert(0, "replicate", np.arange(res.B))
    write_csv(reps, out / "bootstrap_replicates.csv")
    return {"B": res.B, "n_failed": res.n_failed, "bootstrap": str(out / "bootstrap.csv")}


def cmd_diagnose(a) -> dict:
    out = _out_dir(a.out)
    frame = _with_slopes(a.dataset, a.slopes)
    cfg = RunConfig(forest=_forest_cfg(a), slopes=_slope_cfg(a), fee=_fee_spec(a), n_windows=a.windows,
                    oos_splits=tuple(a.splits), max_lag=a.max_lag)
    fee = fit_fee_model(frame, None, cfg.fee)
    paths = run_diagnostics(frame, fee, cfg, out)
    return {k: str(v) for k, v in paths.items()}


def cmd_vcg_check(a) -> dict:
    from .sim.vcg import StaticInstance, compute_vcg_schedule, vcg_payment_bruteforce, vcg_payment_discrete

    rng = np.random.default_rng(a.seed)
    mismatches = 0
    for _ in range(a.instances):
        n = int(rng.integers(1, a.max_n + 1))
        inst = StaticInstance.from_costs(rng.uniform(0.0, 10.0, n))
        for m in range(1, n + 1):
            if vcg_payment_discrete(inst, m) != vcg_payment_bruteforce(inst, m):
                mismatches += 1
    sch = compute_vcg_schedule(lambda q: q, 1.0, grid_m=a.grid_m)
    err = float(np.max(np.abs(sch.b - sch.p**2 / 2)))
    report = {"instances": a.instances, "mismatches": mismatches, "continuous_max_abs_error": err,
              "ok": mismatches == 0 and err < 1e-4}
    if not report["ok"]:
        raise CliError(json.dumps(report), "check_failed")
    return report


def cmd_counterfactual(a) -> dict:
    frame = _with_slopes(a.dataset, a.slopes)
    fit = fit_fee_model(frame, None, _fee_spec(a))
    target = {}
    for item in a.state:
        name, _, val = item.partition("=")
        if not _:
            raise CliError(f"--state expects name=value, got {item!r}")
        target[name] = float(val)
    rows = frame[frame["fee_rate"] >= fit.spec.fee_floor].reset_index(drop=True)
    base = counterfactual(fit, rows, None, a.pi, a.below_eps_mean)
    cf = counterfactual(fit, rows, target or None, a.pi, a.below_eps_mean)
    out = pd.DataFrame({"tx_id": rows["tx_id"], "epoch_id": rows["epoch_id"], "baseline": base, "counterfactual": cf})
    write_csv(out, a.out)
    return {"mean_baseline": float(base.mean()), "mean_counterfactual": float(cf.mean()), "rows": str(a.out)}


def cmd_run(a) -> dict:
    if a.config:
        cfg = RunConfig.load(a.config)
        over = {k: v for k, v in (("tx_file", a.txs), ("snapshot_file", a.snapshots), ("output_dir", a.out)) if v}
        cfg = replace(cfg, **over)
    else:
        if not (a.txs and a.snapshots):
            raise CliError("run needs --config or both --txs and --snapshots", "usage")
        cfg = RunConfig(
            tx_file=a.txs,
            snapshot_file=a.snapshots,
            links_file=a.links,
            weights_file=a.weights,
            output_dir=a.out or "run",
            window_s=a.window,
            forest=_forest_cfg(a),
            slopes=_slope_cfg(a),
            fee=_fee_spec(a),
            bootstrap_B=a.B,
            seed=a.seed,
            diagnostics=not a.no_diagnostics,
        )
    if a.save_config:
        cfg.save(a.save_config)
    m = run_pipeline(cfg)
    return {"manifest": str(Path(cfg.output_dir) / "manifest.json"), "config_hash": m.config_hash, "n_artifacts": len(m.artifacts)}


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="feemarket", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic input files")
    p.add_argument("--generator", choices=("queue", "recovery"), default="queue")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="queue simulator config JSON")
    p.add_argument("--horizon", type=float, help="queue horizon in minutes")
    p.add_argument("--epochs", type=int, default=50, help="recovery generator epochs")
    p.add_argument("--per-epoch", type=int, default=2000, help="recovery generator rows per epoch")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="validate and join input files")
    p.add_argument("--txs", required=True)
    p.add_argument("--snapshots", required=True)
    p.add_argument("--links")
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=float, default=EPOCH_SECONDS)
    p.add_argument("--max-gap", type=float, default=DEFAULT_MAX_GAP)
    p.add_argument("--eps-resp", type=float, default=DEFAULT_EPS_RESP)
    p.add_argument("--max-error-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("rank", help="recompute within-epoch priority percentiles")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("fit-delay", help="cross-fit the delay forest; write schedules and slopes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_forest(p)
    _add_slopes(p)
    p.set_defaults(func=cmd_fit_delay)

    p = sub.add_parser("slopes", help="recompute slopes from saved schedules")
    p.add_argument("--dataset", required=True)
    p.add_argument("--schedules", required=True)
    p.add_argument("--out", required=True)
    _add_slopes(p)
    p.set_defaults(func=cmd_slopes)

    p = sub.add_parser("fit-fee", help="fixed-effects fee regression on saved slopes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--slopes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_fee(p)
    p.set_defaults(func=cmd_fit_fee)

    p = sub.add_parser("bootstrap", help="epoch-block bootstrap of both stages")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-B", type=int, default=200)
    p.add_argument("--boot-seed", type=int, default=0)
    p.add_argument("--boot-jobs", type=int, default=1)
    _add_forest(p)
    _add_slopes(p)
    _add_fee(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("diagnose", help="stability diagnostics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--slopes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--windows", type=int, default=5)
    p.add_argument("--splits", type=float, nargs="+", default=[0.6, 0.7, 0.8])
    p.add_argument("--max-lag", type=int, default=10)
    _add_forest(p)
    _add_slopes(p)
    _add_fee(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("vcg-check", help="verify VCG payments against replay and the closed form")
    p.add_argument("--instances", type=int, default=10_000)
    p.add_argument("--max-n", type=int, default=12)
    p.add_argument("--grid-m", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_vcg_check)

    p = sub.add_parser("counterfactual", help="expected fees with the state set to new values")
    p.add_argument("--dataset", required=True)
    p.add_argument("--slopes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--state", nargs="*", default=[], help="name=value on the regressor scale")
    p.add_argument("--pi", type=float, default=1.0)
    p.add_argument("--below-eps-mean", type=float, default=0.0)
    _add_fee(p)
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("run", help="full pipeline into a run directory")
    p.add_argument("--config", help="RunConfig JSON; flags below are ignored except paths")
    p.add_argument("--txs")
    p.add_argument("--snapshots")
    p.add_argument("--links")
    p.add_argument("--weights")
    p.add_argument("--out")
    p.add_argument("--window", type=float, default=EPOCH_SECONDS)
    p.add_argument("-B", type=int, default=0, help="bootstrap replicates (0 = skip)")
    p.add_argument("--no-diagnostics", action="store_true")
    p.add_argument("--save-config", help="also write the effective config here")
    _add_forest(p)
    _add_slopes(p)
    _add_fee(p)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = a.func(a)
    except PipelineError as exc:
        cat = exc.category
        print(json.dumps({"error": cat, "stage": exc.stage, "message": str(exc.cause)}), file=sys.stderr)
        return EXIT_CODES.get(cat, 1)
    except IngestError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except CliError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(json.dumps({"error": "invalid", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["invalid"]
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
