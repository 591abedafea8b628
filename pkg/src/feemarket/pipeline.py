"""Reproducible end-to-end runs: config, stage artifacts and manifest.

Every artifact is written deterministically (sorted keys, shortest
round-trip floats, fixed row order), so identical inputs and config give
identical bytes. Wall-clock timings go to ``timings.json``, which the
manifest lists but does not hash.
"""
from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .core import DEFAULT_EPS_RESP, DEFAULT_MAX_GAP, EPOCH_SECONDS
from .delay.stage import DelayFit, ForestConfig, SlopeConfig, fit_delay
from .diagnostics import (
    cumulative_precision,
    expanding_oos,
    fe_autocorrelation,
    rolling_fit,
    slope_icc_report,
    variance_decomposition,
)
from .estimate import TwoStageConfig
from .fee.bootstrap import epoch_bootstrap
from .fee.model import SLOPE, FeeFit, FeeSpec, aggregate_spline_effect, coefficient_table, fit_fee_model
from .io import IngestError, ingest

logger = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``category`` tags the cause."""

    def __init__(self, stage: str, cause: BaseException | str, category: str = "stage_failed"):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.category = category


@dataclass(frozen=True)
class RunConfig:
    tx_file: str = ""
    snapshot_file: str = ""
    links_file: str | None = None
    weights_file: str | None = None
    output_dir: str = "run"
    window_s: float = EPOCH_SECONDS
    max_gap: float = DEFAULT_MAX_GAP
    eps_resp: float = DEFAULT_EPS_RESP
    max_error_fraction: float = 0.5
    forest: ForestConfig = field(default_factory=ForestConfig)
    slopes: SlopeConfig = field(default_factory=SlopeConfig)
    fee: FeeSpec = field(default_factory=FeeSpec)
    bootstrap_B: int = 0
    seed: int = 0
    n_windows: int = 5
    oos_splits: tuple[float, ...] = (0.6, 0.7, 0.8)
    max_lag: int = 10
    diagnostics: bool = True

    @property
    def two_stage(self) -> TwoStageConfig:
        return TwoStageConfig(self.forest, self.slopes, self.fee)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oos_splits"] = list(self.oos_splits)
        d["fee"]["controls"] = list(self.fee.controls)
        d["fee"]["states"] = list(self.fee.states)
        d["fee"]["knot_probs"] = list(self.fee.knot_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        ts = TwoStageConfig.from_dict({k: d.pop(k) for k in ("forest", "slopes", "fee") if k in d})
        if "oos_splits" in d:
            d["oos_splits"] = tuple(d["oos_splits"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(forest=ts.forest, slopes=ts.slopes, fee=ts.fee, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        """Hash of the analysis settings; output location is excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    inputs: dict[str, str]
    artifacts: dict[str, str]
    versions: dict[str, str]
    timings_file: str = "timings.json"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    import numba
    import scipy

    return {
        "feemarket": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "numba": numba.__version__,
    }


# -- artifact writers ---------------------------------------------------------

def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FMT, lineterminator="\n")
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n", encoding="utf-8")
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def read_frame(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"tx_id": str}, float_precision="round_trip")


def schedules_frame(fit: DelayFit) -> pd.DataFrame:
    grid = fit.grid
    f = pd.DataFrame(fit.schedules, columns=[f"{g:.6f}" for g in grid])
    f.insert(0, "epoch_id", fit.epoch_ids)
    f.insert(1, "fold", [fit.fold_of_epoch[int(e)] for e in fit.epoch_ids])
    f.insert(2, "trivial", fit.regimes.trivial.astype(int))
    return f


def slopes_frame(fit: DelayFit) -> pd.DataFrame:
    f = fit.slope_frame()
    f[SLOPE] = fit.log_slope
    return f


def delay_summary(fit: DelayFit) -> dict:
    from .delay.stage import FEATURES

    cf = fit.crossfit
    return {
        "oos_r2": cf.r2,
        "oos_rmse": cf.rmse,
        "importances": dict(zip(FEATURES, cf.importances.tolist())),
        "fold_of_epoch": {str(k): v for k, v in sorted(cf.fold_of_epoch.items())},
        "trivial_gradient_share": fit.regimes.trivial_share,
        "forest": asdict(fit.forest_config),
        "slopes": asdict(fit.slope_config),
    }


def fee_fit_dict(fit: FeeFit) -> dict:
    out = {
        "names": list(fit.names),
        "coef": fit.coef,
        "se": fit.se,
        "naive_se": fit.naive_se,
        "cov": fit.cov,
        "alpha0": fit.alpha0,
        "psi": fit.psi,
        "r2_overall": fit.r2_overall,
        "r2_within": fit.r2_within,
        "n_obs": fit.n_obs,
        "n_clusters": fit.n_clusters,
        "df": fit.df,
        "n_below_floor": fit.n_below_floor,
        "dropped": list(fit.dropped),
        "se_inflation": fit.se_inflation(),
        "knots": None if fit.knots is None else fit.knots,
        "spec": asdict(fit.spec),
    }
    if fit.n_spline:
        eff, se = aggregate_spline_effect(fit)
        out["impatience_effect_p50_p95"] = {"effect": eff, "se": se}
    return out


def fee_plot_data(fit: FeeFit, out: Path, n_sample: int = 2000, bins: int = 50) -> dict[str, Path]:
    """Fitted-vs-actual sample, residual histogram and coefficient intervals."""
    n = fit.y.size
    idx = np.linspace(0, n - 1, min(n, n_sample)).astype(np.int64) if n else np.zeros(0, dtype=np.int64)
    paths = {
        "plot_fitted_vs_actual": write_csv(
            pd.DataFrame({"actual": fit.y[idx], "fitted": fit.fitted[idx]}), out / "plot_fitted_vs_actual.csv"
        )
    }
    counts, edges = np.histogram(fit.residuals, bins=bins)
    paths["plot_residual_hist"] = write_csv(
        pd.DataFrame({"lo": edges[:-1], "hi": edges[1:], "count": counts}), out / "plot_residual_hist.csv"
    )
    ci = np.array([fit.conf_int(nm) for nm in fit.names]).reshape(-1, 2)
    paths["plot_coef_ci"] = write_csv(
        pd.DataFrame({"name": fit.names, "estimate": fit.coef, "lo": ci[:, 0], "hi": ci[:, 1]}), out / "plot_coef_ci.csv"
    )
    return paths


# -- pipeline ----------------------------------------------------------------------

class _Stages:
    """Run named stages, recording timings and wrapping failures."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    def __call__(self, name, fn, *args, **kw):
        t = time.perf_counter()
        try:
            return fn(*args, **kw)
        except PipelineError:
            raise
        except IngestError as exc:
            raise PipelineError(name, exc, exc.category) from exc
        except Exception as exc:  # noqa: BLE001 - every stage failure is reported with its stage
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t


def run_diagnostics(frame: pd.DataFrame, fee: FeeFit, cfg: RunConfig, out: Path) -> dict[str, Path]:
    """Write the diagnostic reports. ``frame`` must carry ``log_slope``."""
    paths: dict[str, Path] = {}
    ts = cfg.two_stage
    paths["icc"] = write_csv(slope_icc_report(frame), out / "diag_icc.csv")
    # residual net of the structural part and the intercept, epoch effects left in
    strict = fee.residuals + fee.xi[fee.groups]
    dec = variance_decomposition(fee.y, strict, fee.groups)
    vd_rows = [
        {"series": kind, "total": sh.total, "between": sh.between, "within": sh.within,
         "between_share": sh.between_share, "icc": sh.icc}
        for kind, sh in (("outcome", dec.outcome), ("strict_residual", dec.residual))
    ]
    paths["variance"] = write_csv(pd.DataFrame(vd_rows), out / "diag_variance.csv")
    E = fee.n_clusters
    lag = min(cfg.max_lag, E - 2)
    if lag >= 1:
        cg = fe_autocorrelation(fee.xi, lag)
        paths["fe_acf"] = write_csv(
            pd.DataFrame({"lag": cg.lags, "rho": cg.rho, "band": cg.band}), out / "diag_fe_acf.csv"
        )
    n_win = min(cfg.n_windows, E // max(2, cfg.forest.n_folds))
    if n_win >= 1:
        rf = rolling_fit(frame.drop(columns=[SLOPE]), ts, n_win, pooled=fee)
        paths["rolling"] = write_csv(rf.windows, out / "diag_rolling.csv")
        paths["rolling_summary"] = write_csv(rf.summary, out / "diag_rolling_summary.csv")
    splits = [s for s in cfg.oos_splits if round(s * E) >= cfg.forest.n_folds and round(s * E) < E]
    if splits:
        oos = expanding_oos(frame.drop(columns=[SLOPE]), ts, splits)
        paths["oos"] = write_csv(oos.table(), out / "diag_oos.csv")
        rows = []
        for s in oos.splits:
            for kind, sh in (("test_outcome", s.outcome_shares), ("strict_residual", s.residual_shares)):
                if sh is not None:
                    rows.append({"fraction": s.fraction, "series": kind, "total": sh.total, "between": sh.between,
                                 "within": sh.within, "between_share": sh.between_share, "icc": sh.icc})
        paths["oos_variance"] = write_csv(pd.DataFrame(rows), out / "diag_oos_variance.csv")
    if E >= 4 and fee.spec.include_slope:
        ks = np.unique(np.linspace(2, E, min(E - 1, 10)).astype(int))
        pc = cumulative_precision(frame, fee.spec, ks)
        paths["precision"] = write_csv(pd.DataFrame({"n_epochs": pc.n_epochs, "se": pc.se}), out / "diag_precision.csv")
    return paths


def run_pipeline(cfg: RunConfig) -> RunManifest:
    """Ingest, rank, fit both stages, optionally bootstrap, run diagnostics.

    Every intermediate artifact is written under ``cfg.output_dir`` as soon
    as it exists, so a failure leaves the earlier stages on disk.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = _Stages()
    arts: dict[str, Path] = {"config": cfg.save(out / "config.json")}

    res = stage(
        "ingest",
        ingest,
        cfg.tx_file,
        cfg.snapshot_file,
        cfg.links_file,
        cfg.weights_file,
        cfg.window_s,
        cfg.max_gap,
        cfg.eps_resp,
        cfg.max_error_fraction,
    )
    arts["ingest_report"] = write_json(res.report.to_dict(), out / "ingest_report.json")

    frame = stage("rank", res.dataset.to_frame)
    arts["dataset"] = write_csv(frame, out / "dataset.csv")
    arts["ranks"] = write_csv(frame[["tx_id", "epoch_id", "fee_rate", "p"]], out / "ranks.csv")
    epochs = pd.DataFrame([asdict(e) for e in res.dataset.epochs])
    arts["epochs"] = write_csv(epochs, out / "epochs.csv")

    delay = stage("fit-delay", fit_delay, frame, cfg.forest, cfg.slopes)
    arts["delay_summary"] = write_json(delay_summary(delay), out / "delay_summary.json")
    arts["schedules"] = write_csv(schedules_frame(delay), out / "schedules.csv")
    arts["slopes"] = write_csv(slopes_frame(delay), out / "slopes.csv")

    fee = stage("fit-fee", fit_fee_model, frame, delay, cfg.fee)
    arts["coefficients"] = write_csv(coefficient_table(fee), out / "coefficients.csv")
    arts["fee_fit"] = write_json(fee_fit_dict(fee), out / "fee_fit.json")
    arts["epoch_effects"] = write_csv(fee.xi_series().reset_index(), out / "epoch_effects.csv")
    arts.update(stage("plot-data", fee_plot_data, fee, out))

    if cfg.bootstrap_B > 0:
        boot = stage("bootstrap", epoch_bootstrap, frame, cfg.two_stage, cfg.bootstrap_B, cfg.seed)
        arts["bootstrap"] = write_csv(boot.table(), out / "bootstrap.csv")
        reps = pd.DataFrame(boot.replicates, columns=boot.names)
        reps.insert(0, "replicate", np.arange(boot.B))
        arts["bootstrap_replicates"] = write_csv(reps, out / "bootstrap_replicates.csv")
    if cfg.diagnostics:
        framed = frame.copy()
        framed[SLOPE] = delay.log_slope
        arts.update(stage("diagnose", run_diagnostics, framed, fee, cfg, out))

    write_json(stage.timings, out / "timings.json")
    inputs = {k: file_digest(p) for k, p in (("tx_file", cfg.tx_file), ("snapshot_file", cfg.snapshot_file),
                                              ("links_file", cfg.links_file), ("weights_file", cfg.weights_file)) if p}
    manifest = RunManifest(
        config_hash=cfg.digest(),
        inputs=inputs,
        artifacts={str(p.relative_to(out)): file_digest(p) for p in sorted(arts.values())},
        versions=versions(),
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest
