"""End-to-end tests for the command-line pipeline.

Everything here runs on deliberately tiny configurations (a handful of
scenes, one or two epochs) so the full simulate → inject → train → embed →
detect → evaluate chain stays in the sub-minute range while still exercising
the real artifacts.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from trackmon.cli import EXIT_DOMAIN_ERROR, EXIT_OK, EXIT_USAGE_ERROR, main
from trackmon.config import (
    PipelineConfig,
    apply_overrides,
    config_from_dict,
    dump_config,
    load_config,
)
from trackmon.nn.serial import load_arrays, save_arrays
from trackmon.objects import DomainError, SchemaError

TINY = {
    "n_train_scenes": 8,
    "n_test_scenes": 4,
    "n_seeds": 2,
    "simulator": {"duration_steps": 24, "n_objects_min": 2, "n_objects_max": 4},
    "training": {"epochs": 2, "batch_size": 16},
}


@pytest.fixture()
def runs_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("TRACKMON_RUNS", str(root))
    return root


def write_config(tmp_path, extra=None) -> Path:
    data = json.loads(json.dumps(TINY))
    if extra:
        data.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def staged_run(tmp_path_factory):
    """One tiny run taken through every stage, shared by read-only tests."""
    tmp = tmp_path_factory.mktemp("staged")
    root = tmp / "runs"
    cfg = tmp / "config.json"
    cfg.write_text(json.dumps(TINY), encoding="utf-8")
    import os

    old = os.environ.get("TRACKMON_RUNS")
    os.environ["TRACKMON_RUNS"] = str(root)
    try:
        assert main(["--quiet", "simulate", "--config", str(cfg), "--run", "t"]) == EXIT_OK
        for stage in ("inject", "train", "embed", "detect", "evaluate"):
            assert main(["--quiet", stage, "--run", "t"]) == EXIT_OK
    finally:
        if old is None:
            os.environ.pop("TRACKMON_RUNS", None)
        else:
            os.environ["TRACKMON_RUNS"] = old
    return root / "t"


# ---------------------------------------------------------------------------
# stage artifacts
# ---------------------------------------------------------------------------

def test_run_directory_layout(staged_run):
    for rel in (
        "config.snapshot",
        "dataset/train.ndjson",
        "dataset/test.ndjson",
        "dataset/eval.ndjson",
        "dataset/injections.ndjson",
        "checkpoint/params.npz",
        "checkpoint/meta.json",
        "embeddings/train.npz",
        "embeddings/eval.npz",
        "embeddings/stats.json",
        "scores/embedding.csv",
        "scores/baseline.csv",
        "scores/severity.csv",
        "scores/thresholds.json",
        "report/report.json",
    ):
        assert (staged_run / rel).exists(), rel


def test_snapshot_round_trips_through_loader(staged_run):
    config = load_config(staged_run / "config.snapshot")
    assert config.n_train_scenes == TINY["n_train_scenes"]
    assert config.training.epochs == 2
    # canonical dump is a fixed point
    assert dump_config(config) == (staged_run / "config.snapshot").read_text(
        encoding="utf-8"
    )


def test_report_structure(staged_run):
    report = json.loads((staged_run / "report" / "report.json").read_text())
    assert sorted(report["metrics"]) == ["baseline", "embedding"]
    for rep in ("baseline", "embedding"):
        for kind in ("abod", "lof", "gmm"):
            entry = report["metrics"][rep][kind]
            assert 0.0 <= entry["auroc"] <= 1.0
            assert {"fpr", "tpr", "thresholds"} <= set(entry["roc"])
            assert entry["calibrated"]["tp"] + entry["calibrated"]["fn"] > 0
    assert report["severity"]["detector"] == "lof"
    assert len(report["severity"]["median_anomalous_scores"]) == 3
    stats = report["embedding_stats"]
    assert 0.0 <= stats["fraction_std_above_1e-3"] <= 1.0


def test_score_csv_columns(staged_run):
    header = (staged_run / "scores" / "embedding.csv").read_text().splitlines()[0]
    assert header == "track_id,scene_id,label,detector,score,prediction"
    header = (staged_run / "scores" / "severity.csv").read_text().splitlines()[0]
    assert header == "mu,track_id,scene_id,label,detector,score,prediction"


def test_simulate_rerun_is_byte_identical(staged_run, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TINY), encoding="utf-8")
    out = tmp_path / "again"
    assert main(["--quiet", "simulate", "--config", str(cfg), "--run", str(out)]) == EXIT_OK
    for name in ("train.ndjson", "test.ndjson", "meta.json"):
        assert (out / "dataset" / name).read_bytes() == (
            staged_run / "dataset" / name
        ).read_bytes()


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------

def test_reproduce_runs_are_byte_identical(tmp_path, runs_root, capsys):
    cfg = write_config(tmp_path, {"training": {"epochs": 1, "batch_size": 16}})
    assert main(["--quiet", "reproduce", "--config", str(cfg), "--run", "a"]) == EXIT_OK
    table_a = capsys.readouterr().out
    assert main(["--quiet", "reproduce", "--config", str(cfg), "--run", "b"]) == EXIT_OK
    table_b = capsys.readouterr().out

    assert table_a == table_b
    for row in ("baseline", "abod", "lof", "gmm"):
        assert row in table_a
    for col in ("AUROC", "F1", "MCC", "Acc", "FPR95", "TPR5", "TPR1"):
        assert col in table_a

    run_a, run_b = runs_root / "a", runs_root / "b"
    files_a = sorted(p.relative_to(run_a) for p in run_a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(run_b) for p in run_b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (run_a / rel).read_bytes() == (run_b / rel).read_bytes(), rel

    # third invocation over an existing run directory changes nothing
    assert main(["--quiet", "reproduce", "--config", str(cfg), "--run", "a"]) == EXIT_OK
    for rel in files_a:
        assert (run_a / rel).read_bytes() == (run_b / rel).read_bytes(), rel


def test_parallel_workers_match_serial_schedule(tmp_path, runs_root):
    cfg = write_config(tmp_path, {"training": {"epochs": 1, "batch_size": 16}})
    assert main(["--quiet", "reproduce", "--config", str(cfg), "--run", "ser"]) == EXIT_OK
    assert main(["--quiet", "reproduce", "--config", str(cfg), "--run", "par",
                 "--workers", "2"]) == EXIT_OK
    run_s, run_p = runs_root / "ser", runs_root / "par"
    files = sorted(p.relative_to(run_s) for p in run_s.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(run_p) for p in run_p.rglob("*") if p.is_file())
    for rel in files:
        assert (run_s / rel).read_bytes() == (run_p / rel).read_bytes(), rel


def test_aggregate_table_files(tmp_path, runs_root):
    cfg = write_config(tmp_path, {"training": {"epochs": 1, "batch_size": 16}})
    assert main(["--quiet", "reproduce", "--config", str(cfg), "--run", "agg"]) == EXIT_OK
    report_dir = runs_root / "agg" / "report"
    aggregate = json.loads((report_dir / "aggregate.json").read_text())
    assert aggregate["n_seeds"] == 2
    assert sorted(aggregate["rows"]) == ["abod", "baseline", "gmm", "lof"]
    cell = aggregate["rows"]["lof"]["AUROC"]
    assert len(cell["values"]) == 2
    assert cell["mean"] == pytest.approx(float(np.mean(cell["values"])))
    assert cell["std"] == pytest.approx(float(np.std(cell["values"], ddof=1)))
    assert (report_dir / "table.txt").exists()
    assert (report_dir / "table.csv").read_text().splitlines()[0] == (
        "detector,metric,mean,std"
    )
    # per-seed sub-runs are complete runs of their own
    for i in range(2):
        assert (runs_root / "agg" / f"seed-{i}" / "report" / "report.json").exists()


# ---------------------------------------------------------------------------
# config surface
# ---------------------------------------------------------------------------

def test_unknown_config_key_rejected(tmp_path, runs_root):
    cfg = write_config(tmp_path, {"not_a_key": 1})
    assert main(["simulate", "--config", str(cfg), "--run", "x"]) == EXIT_DOMAIN_ERROR


def test_derived_seed_keys_rejected(tmp_path, runs_root):
    for section in ("simulator", "training"):
        data = json.loads(json.dumps(TINY))
        data[section]["seed"] = 7
        cfg = tmp_path / f"{section}.json"
        cfg.write_text(json.dumps(data), encoding="utf-8")
        assert main(["simulate", "--config", str(cfg), "--run", "x"]) == EXIT_DOMAIN_ERROR


def test_set_override_applies(tmp_path, runs_root):
    cfg = write_config(tmp_path)
    assert main([
        "--quiet", "simulate", "--config", str(cfg), "--run", "o",
        "--set", "simulator.duration_steps=16", "--set", "seed=3",
    ]) == EXIT_OK
    snapshot = json.loads((runs_root / "o" / "config.snapshot").read_text())
    assert snapshot["simulator"]["duration_steps"] == 16
    assert snapshot["seed"] == 3


def test_malformed_override_is_usage_error(tmp_path, runs_root):
    cfg = write_config(tmp_path)
    assert main(
        ["simulate", "--config", str(cfg), "--run", "x", "--set", "no-equals"]
    ) == EXIT_USAGE_ERROR


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == EXIT_USAGE_ERROR


def test_missing_run_flag_is_usage_error():
    assert main(["train"]) == EXIT_USAGE_ERROR


def test_apply_overrides_parses_json_values():
    out = apply_overrides({}, ["training.epochs=40", "error_model.feature=v",
                               "evaluation.severity_means=[1.0, 2.0, 3.0]"])
    assert out["training"]["epochs"] == 40
    assert out["error_model"]["feature"] == "v"
    assert out["evaluation"]["severity_means"] == [1.0, 2.0, 3.0]


def test_config_defaults_match_published_settings():
    config = PipelineConfig()
    assert config.training.masking.n_masked == 4
    assert config.training.encoder.embed_dim == 32
    assert config.training.learning_rate == pytest.approx(3e-5)
    assert config.training.epochs == 250
    assert config.training.ema_decay == pytest.approx(0.99)
    assert config.detector.lof_neighbors == 15
    assert config.detector.gmm_components == 5
    assert config.error_model.mu == pytest.approx(5.0)
    assert config.error_model.sigma == pytest.approx(0.1)


def test_dump_config_round_trip():
    config = PipelineConfig()
    again = config_from_dict(json.loads(dump_config(config)))
    assert again == config


# ---------------------------------------------------------------------------
# stage errors
# ---------------------------------------------------------------------------

def test_stage_on_missing_run_is_domain_error(runs_root, capsys):
    assert main(["inject", "--run", "nope"]) == EXIT_DOMAIN_ERROR
    assert "config.snapshot" in capsys.readouterr().err


def test_error_json_flag_emits_machine_readable_line(runs_root, capsys):
    assert main(["--error-json", "inject", "--run", "nope"]) == EXIT_DOMAIN_ERROR
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "DomainError"
    assert "config.snapshot" in payload["message"]


def test_detect_rejects_foreign_embedding_dimension(staged_run, tmp_path, capsys):
    # clone the run, doctor the eval embeddings to claim a different width
    import shutil

    clone = tmp_path / "doctored"
    shutil.copytree(staged_run, clone)
    path = clone / "embeddings" / "eval.npz"
    arrays = dict(load_arrays(path))
    arrays["embed_dim"] = np.array([16], dtype=np.int64)
    save_arrays(path, arrays)
    assert main(["detect", "--run", str(clone)]) == EXIT_DOMAIN_ERROR
    assert "16" in capsys.readouterr().err


def test_detect_rejects_foreign_checkpoint_id(staged_run, tmp_path, capsys):
    import shutil

    clone = tmp_path / "doctored2"
    shutil.copytree(staged_run, clone)
    path = clone / "embeddings" / "train.npz"
    arrays = dict(load_arrays(path))
    arrays["checkpoint_id"] = np.array(["0000000000000000"])
    save_arrays(path, arrays)
    assert main(["detect", "--run", str(clone)]) == EXIT_DOMAIN_ERROR
    assert "checkpoint" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# run-dir resolution
# ---------------------------------------------------------------------------

def test_relative_run_name_lands_under_env_root(tmp_path, runs_root):
    cfg = write_config(tmp_path)
    assert main(["--quiet", "simulate", "--config", str(cfg), "--run", "rel"]) == EXIT_OK
    assert (runs_root / "rel" / "config.snapshot").exists()


def test_absolute_run_path_ignores_env_root(tmp_path, runs_root):
    cfg = write_config(tmp_path)
    target = tmp_path / "elsewhere"
    assert main(["--quiet", "simulate", "--config", str(cfg), "--run", str(target)]) == EXIT_OK
    assert (target / "config.snapshot").exists()
    assert not (runs_root / str(target).lstrip("/")).exists()
