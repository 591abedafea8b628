from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from feemarket.cli import main
from feemarket.delay.stage import ForestConfig
from feemarket.pipeline import PipelineError, RunConfig, file_digest, read_frame, run_pipeline

FOREST = ["--trees", "10", "--min-leaf", "20", "--folds", "3", "--jobs", "1"]


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("in")
    assert main(["simulate", "--generator", "recovery", "--epochs", "12", "--per-epoch", "300", "--seed", "1", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def config(inputs, tmp_path_factory):
    return RunConfig(
        tx_file=str(inputs / "txs.jsonl"),
        snapshot_file=str(inputs / "snapshots.csv"),
        output_dir=str(tmp_path_factory.mktemp("run")),
        forest=ForestConfig(n_trees=10, min_leaf=20, n_folds=3, n_jobs=1),
    )


@pytest.fixture(scope="module")
def run_dir(config):
    run_pipeline(config)
    return Path(config.output_dir)


def _bytes(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timings.json"}


def test_manifest_lists_every_artifact(run_dir, config):
    m = json.loads((run_dir / "manifest.json").read_text())
    for name in ("dataset.csv", "ranks.csv", "schedules.csv", "slopes.csv", "coefficients.csv", "fee_fit.json",
                 "diag_icc.csv", "diag_rolling.csv", "diag_oos.csv", "diag_fe_acf.csv", "diag_precision.csv"):
        assert name in m["artifacts"]
    for name, digest in m["artifacts"].items():
        assert file_digest(run_dir / name) == digest
    assert "timings.json" not in m["artifacts"]
    assert (run_dir / m["timings_file"]).exists()
    assert m["config_hash"] == config.digest()
    assert set(m["inputs"]) == {"tx_file", "snapshot_file"}
    assert set(m["versions"]) >= {"feemarket", "numpy", "scipy"}


def test_rerun_is_byte_identical(run_dir, config):
    first = _bytes(run_dir)
    run_pipeline(config)
    assert _bytes(run_dir) == first


def test_output_location_only_changes_config_file(run_dir, config, tmp_path):
    run_pipeline(replace(config, output_dir=str(tmp_path)))
    a, b = _bytes(run_dir), _bytes(tmp_path)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == ["config.json", "manifest.json"]
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (run_dir, tmp_path))
    assert ma["config_hash"] == mb["config_hash"]


def test_too_many_folds_aborts_in_delay_stage(config, tmp_path):
    cfg = replace(config, output_dir=str(tmp_path), forest=replace(config.forest, n_folds=20))
    with pytest.raises(PipelineError) as ei:
        run_pipeline(cfg)
    assert ei.value.stage == "fit-delay"
    assert "cross-fitting needs n_folds <= number of epochs" in str(ei.value)
    # earlier stages stay on disk
    assert (tmp_path / "dataset.csv").exists()
    assert not (tmp_path / "manifest.json").exists()


def test_cli_exit_code_for_fold_precondition(inputs, tmp_path, capsys):
    code = main(["run", "--txs", str(inputs / "txs.jsonl"), "--snapshots", str(inputs / "snapshots.csv"),
                 "--out", str(tmp_path), "--trees", "5", "--folds", "20"])
    assert code == 4
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "stage_failed"
    assert err["stage"] == "fit-delay"
    assert "cross-fitting" in err["message"]


def test_config_round_trip(config, tmp_path):
    again = RunConfig.load(config.save(tmp_path / "c.json"))
    assert again == config
    assert again.to_json() == config.to_json()
    assert replace(config, output_dir="elsewhere").digest() == config.digest()
    assert replace(config, seed=1).digest() != config.digest()
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({**config.to_dict(), "bogus": 1})


def test_run_from_saved_config(inputs, run_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["run", "--config", str(run_dir / "config.json"), "--out", str(out)]) == 0
    assert _bytes(out)["coefficients.csv"] == _bytes(run_dir)["coefficients.csv"]


def test_cli_stage_subcommands(inputs, tmp_path, capsys):
    ing = tmp_path / "ing"
    assert main(["ingest", "--txs", str(inputs / "txs.jsonl"), "--snapshots", str(inputs / "snapshots.csv"), "--out", str(ing)]) == 0
    rep = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rep["records_in"] == rep["records_kept"] + rep["records_dropped"] == 3600
    ds = ing / "dataset.csv"

    assert main(["rank", "--dataset", str(ds), "--out", str(tmp_path / "ranks.csv")]) == 0
    ranks = pd.read_csv(tmp_path / "ranks.csv", float_precision="round_trip")
    assert np.array_equal(ranks["p"], read_frame(ds)["p"])

    fd = tmp_path / "delay"
    assert main(["fit-delay", "--dataset", str(ds), "--out", str(fd), *FOREST]) == 0
    assert main(["slopes", "--dataset", str(ds), "--schedules", str(fd / "schedules.csv"), "--out", str(tmp_path / "s.csv")]) == 0
    saved = pd.read_csv(fd / "slopes.csv", float_precision="round_trip")
    again = pd.read_csv(tmp_path / "s.csv", float_precision="round_trip")
    np.testing.assert_allclose(again["log_slope"], saved["log_slope"], rtol=0, atol=1e-12)

    assert main(["fit-fee", "--dataset", str(ds), "--slopes", str(fd / "slopes.csv"), "--out", str(tmp_path / "fee"), "--quiet"]) == 0
    coef = pd.read_csv(tmp_path / "fee" / "coefficients.csv")
    assert "log_slope" in set(coef["name"])

    assert main(["diagnose", "--dataset", str(ds), "--slopes", str(fd / "slopes.csv"), "--out", str(tmp_path / "diag"),
                 "--windows", "2", "--splits", "0.75", *FOREST]) == 0
    assert (tmp_path / "diag" / "diag_oos.csv").exists()

    assert main(["counterfactual", "--dataset", str(ds), "--slopes", str(fd / "slopes.csv"),
                 "--out", str(tmp_path / "cf.csv"), "--state", "blockspace_util=0.9"]) == 0
    cf = pd.read_csv(tmp_path / "cf.csv")
    assert np.all(cf["baseline"] > 0)

    assert main(["bootstrap", "--dataset", str(ds), "--out", str(tmp_path / "boot"), "-B", "2", *FOREST]) == 0
    reps = pd.read_csv(tmp_path / "boot" / "bootstrap_replicates.csv")
    assert len(reps) == 2


def test_cli_counterfactual_rejects_bad_state(inputs, run_dir, tmp_path):
    code = main(["counterfactual", "--dataset", str(run_dir / "dataset.csv"), "--slopes", str(run_dir / "slopes.csv"),
                 "--out", str(tmp_path / "cf.csv"), "--state", "blockspace_util"])
    assert code == 5


def test_cli_vcg_check(capsys):
    assert main(["vcg-check", "--instances", "300", "--max-n", "8"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["ok"] and rep["mismatches"] == 0
    assert rep["continuous_max_abs_error"] < 1e-4


def test_cli_simulate_queue(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--horizon", "120", "--seed", "2"]) == 0
    for name in ("txs.jsonl", "snapshots.csv", "truth_agents.csv", "sim_config.json"):
        assert (tmp_path / name).exists()


def test_cli_empty_snapshots_exit_code(inputs, tmp_path, capsys):
    empty = tmp_path / "s.csv"
    empty.write_text("")
    code = main(["ingest", "--txs", str(inputs / "txs.jsonl"), "--snapshots", str(empty), "--out", str(tmp_path / "o")])
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "no_state"
    assert "no epoch state available" in err["message"]


def test_cli_run_needs_inputs(capsys):
    assert main(["run"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "usage"
