"""Run-directory pipeline: simulate, inject, train, embed, detect, evaluate.

Every experiment lives in one *run directory*:

.. code-block:: text

    run/
      config.snapshot          resolved config JSON (written by simulate)
      dataset/                 train/test tracks, eval sets, injection audit
      checkpoint/              trained model parameters + metadata
      embeddings/              latent tokens and summary vectors per split
      scores/                  detector scores/predictions + thresholds
      report/                  evaluation report JSON, figure CSVs, table

Stages only read files produced by earlier stages and never modify them, so
any stage can be rerun in isolation; identical inputs yield byte-identical
outputs (reports carry no timestamps and all serialization is canonical).

Seed fan-out
------------
Each stage draws its own seed from the single global config seed through a
documented splitting rule::

    stage_seed(seed, code, *extra) =
        first uint32 of SeedSequence([seed, code, *extra])

with fixed stage codes: simulate=1, inject=2, train=3, detect=4 (detect adds
the detector index as ``extra``).  ``reproduce`` derives the global seed of
its i-th constituent run as ``stage_seed(seed, 0, i)``.  Identical global
seeds therefore reproduce any stage independently of the others.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from trackmon.config import PipelineConfig, config_from_dict, dump_config
from trackmon.detect import (
    DETECTOR_KINDS,
    FittedDetector,
    baseline_matrix,
    fit_detector,
    summarize,
)
from trackmon.inject import build_eval_set, save_injection_records
from trackmon.jepa import Checkpoint, Embedding, embed_tracks, train
from trackmon.metrics import (
    auroc,
    confusion_metrics,
    fpr_at_tpr,
    roc_curve,
    score_histogram,
    tpr_at_fpr,
    youden_threshold,
)
from trackmon.nn.serial import load_arrays, save_arrays
from trackmon.objects import (
    DomainError,
    SchemaError,
    fit_stats,
    load_tracks,
    save_tracks,
)
from trackmon.simulate import generate_dataset

EMBEDDING_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1

_STAGE_RUN = 0
_STAGE_SIMULATE = 1
_STAGE_INJECT = 2
_STAGE_TRAIN = 3
_STAGE_DETECT = 4

CONFIG_SNAPSHOT = "config.snapshot"

Echo = Callable[[str], None]


def _say(echo: Echo | None, message: str) -> None:
    if echo is not None:
        echo(message)


def stage_seed(seed: int, code: int, *extra: int) -> int:
    """The documented seed-splitting rule (see module docstring)."""
    ss = np.random.SeedSequence([int(seed), int(code), *[int(e) for e in extra]])
    return int(ss.generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# run-directory paths
# ---------------------------------------------------------------------------

def snapshot_path(run_dir: Path) -> Path:
    return run_dir / CONFIG_SNAPSHOT


def load_run_config(run_dir: str | Path) -> PipelineConfig:
    run_dir = Path(run_dir)
    path = snapshot_path(run_dir)
    if not path.exists():
        raise DomainError(
            f"{run_dir} has no {CONFIG_SNAPSHOT}; start a run with `simulate`"
        )
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc.msg}") from exc
    return config_from_dict(data)


def _severity_name(index: int) -> str:
    return f"severity-{index}"


def _mu_label(mu: float) -> str:
    return f"mu={mu:g}"


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------

def save_embeddings(path: Path, embeddings: Sequence[Embedding]) -> None:
    """Persist a split's token embeddings plus provenance, deterministically."""
    if not embeddings:
        raise DomainError("cannot save an empty embedding list")
    dim = embeddings[0].values.shape[1]
    offsets = np.zeros(len(embeddings) + 1, dtype=np.int64)
    for i, e in enumerate(embeddings):
        offsets[i + 1] = offsets[i] + e.values.shape[0]
    tokens = np.concatenate([e.values for e in embeddings], axis=0)
    summaries = np.stack([summarize(e.values) for e in embeddings])
    labels = np.array(
        [-1 if e.label is None else int(e.label) for e in embeddings], dtype=np.int64
    )
    save_arrays(
        path,
        {
            "schema_version": np.array([EMBEDDING_SCHEMA_VERSION], dtype=np.int64),
            "embed_dim": np.array([dim], dtype=np.int64),
            "checkpoint_id": np.array([embeddings[0].checkpoint_id]),
            "tokens": tokens,
            "offsets": offsets,
            "summary": summaries,
            "label": labels,
            "track_id": np.array([e.track_id for e in embeddings]),
            "scene_id": np.array([e.scene_id for e in embeddings]),
        },
    )


def load_embeddings(path: Path) -> dict:
    """Load one split's embedding arrays; validates the schema version."""
    if not path.exists():
        raise DomainError(f"embedding file not found: {path}")
    arrays = load_arrays(path)
    version = int(arrays["schema_version"][0])
    if version != EMBEDDING_SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported embedding schema {version}; "
            f"expected {EMBEDDING_SCHEMA_VERSION}"
        )
    return {
        "embed_dim": int(arrays["embed_dim"][0]),
        "checkpoint_id": str(arrays["checkpoint_id"][0]),
        "tokens": arrays["tokens"],
        "offsets": arrays["offsets"],
        "summary": arrays["summary"],
        "label": arrays["label"],
        "track_id": [str(s) for s in arrays["track_id"]],
        "scene_id": [str(s) for s in arrays["scene_id"]],
    }


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_simulate(config: PipelineConfig, run_dir: str | Path, echo: Echo | None = None) -> Path:
    """Create/refresh a run directory: config snapshot plus train/test tracks."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot_path(run_dir).write_text(dump_config(config), encoding="utf-8")

    dataset = generate_dataset(
        config.simulator,
        n_train_scenes=config.n_train_scenes,
        n_test_scenes=config.n_test_scenes,
        seed=stage_seed(config.seed, _STAGE_SIMULATE),
    )
    dataset_dir = run_dir / "dataset"
    save_tracks(dataset.train, dataset_dir / "train.ndjson")
    save_tracks(dataset.test, dataset_dir / "test.ndjson")
    meta = dict(dataset.meta)
    meta["n_train_tracks"] = len(dataset.train)
    meta["n_test_tracks"] = len(dataset.test)
    (dataset_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _say(echo, f"simulate: {len(dataset.train)} train / {len(dataset.test)} test tracks")
    return run_dir


def cmd_inject(run_dir: str | Path, echo: Echo | None = None) -> None:
    """Build the labeled eval set and the severity-sweep variants."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    dataset_dir = run_dir / "dataset"
    test_tracks = load_tracks(dataset_dir / "test.ndjson")
    seed = stage_seed(config.seed, _STAGE_INJECT)

    eval_set, records = build_eval_set(
        test_tracks, config.error_model.spec(), seed=seed, paired=config.error_model.paired
    )
    save_tracks(eval_set, dataset_dir / "eval.ndjson")
    save_injection_records(records, dataset_dir / "injections.ndjson")
    _say(echo, f"inject: eval set of {len(eval_set)} tracks "
               f"({sum(t.label for t in eval_set)} anomalous)")

    # same seed for every severity mean: identical track selection and
    # timesteps, so the sweep isolates the effect of the offset magnitude
    for k, mu in enumerate(config.evaluation.severity_means):
        sev, sev_records = build_eval_set(
            test_tracks, config.error_model.spec(mu), seed=seed, paired=False
        )
        save_tracks(sev, dataset_dir / f"{_severity_name(k)}.ndjson")
        save_injection_records(
            sev_records, dataset_dir / f"{_severity_name(k)}-injections.ndjson"
        )


def cmd_train(run_dir: str | Path, echo: Echo | None = None) -> None:
    """Fit the embedding model on the run's train tracks and checkpoint it."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    train_cfg = replace(config.training, seed=stage_seed(config.seed, _STAGE_TRAIN))
    tracks = load_tracks(run_dir / "dataset" / "train.ndjson")
    checkpoint_dir = run_dir / "checkpoint"

    resume = None
    if (checkpoint_dir / "meta.json").exists():
        existing = Checkpoint.load(checkpoint_dir)
        same_recipe = replace(existing.config, epochs=train_cfg.epochs) == train_cfg
        if same_recipe and existing.epoch >= train_cfg.epochs:
            _say(echo, f"train: checkpoint already at epoch {existing.epoch}, nothing to do")
            return
        if same_recipe:
            resume = existing
            _say(echo, f"train: resuming from epoch {existing.epoch}")

    state = train(
        tracks,
        train_cfg,
        resume=resume,
        progress=(lambda e, l: _say(echo, f"train: epoch {e} loss {l:.4f}")),
    )
    checkpoint_id = state.save(checkpoint_dir)
    _say(echo, f"train: saved checkpoint {checkpoint_id} at epoch {state.epoch}")


def _split_files(run_dir: Path, config: PipelineConfig) -> list[tuple[str, Path]]:
    dataset_dir = run_dir / "dataset"
    splits = [("train", dataset_dir / "train.ndjson"), ("eval", dataset_dir / "eval.ndjson")]
    for k in range(len(config.evaluation.severity_means)):
        name = _severity_name(k)
        splits.append((name, dataset_dir / f"{name}.ndjson"))
    return splits


def cmd_embed(run_dir: str | Path, echo: Echo | None = None) -> None:
    """Embed every split with the run's checkpoint; record summary statistics."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    state = Checkpoint.load(run_dir / "checkpoint")
    embeddings_dir = run_dir / "embeddings"

    train_summaries = None
    for name, path in _split_files(run_dir, config):
        if not path.exists():
            raise DomainError(f"missing {path.name}; run the earlier stages first")
        tracks = load_tracks(path)
        embedded = embed_tracks(tracks, state)
        save_embeddings(embeddings_dir / f"{name}.npz", embedded)
        if name == "train":
            train_summaries = np.stack([summarize(e.values) for e in embedded])
        _say(echo, f"embed: {name} ({len(embedded)} tracks)")

    per_dim_std = train_summaries.std(axis=0)
    stats = {
        "checkpoint_id": state.checkpoint_id,
        "n_tracks": int(train_summaries.shape[0]),
        "n_dims": int(train_summaries.shape[1]),
        "per_dim_std": [float(s) for s in per_dim_std],
        "fraction_std_above_1e-3": float(np.mean(per_dim_std > 1e-3)),
    }
    (embeddings_dir / "stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _score_rows(
    tracks_ids: Sequence[tuple[str, str]],
    labels: np.ndarray,
    detector: FittedDetector,
    scores: np.ndarray,
) -> list[str]:
    predictions = detector.predict(scores)
    rows = []
    for (track_id, scene_id), label, score, pred in zip(
        tracks_ids, labels, scores, predictions
    ):
        label_text = "" if label < 0 else str(int(label))
        rows.append(
            f"{track_id},{scene_id},{label_text},{detector.kind},"
            f"{float(score)!r},{int(pred)}"
        )
    return rows


_SCORE_HEADER = "track_id,scene_id,label,detector,score,prediction"


def _write_csv(path: Path, header: str, rows: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")


def cmd_detect(run_dir: str | Path, echo: Echo | None = None) -> None:
    """Fit detectors on train data and score the eval splits.

    Two representations are scored: the latent summary vectors (embedding
    path) and standardized fixed-length raw features (baseline path).  The
    severity sweep is scored in the embedding space with the configured
    severity detector.
    """
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    det_cfg = config.detector
    scores_dir = run_dir / "scores"
    embeddings_dir = run_dir / "embeddings"

    # embedding representation ------------------------------------------------
    checkpoint_meta = json.loads(
        (run_dir / "checkpoint" / "meta.json").read_text(encoding="utf-8")
    )
    train_emb = load_embeddings(embeddings_dir / "train.npz")
    eval_emb = load_embeddings(embeddings_dir / "eval.npz")
    for name, emb in (("train", train_emb), ("eval", eval_emb)):
        if emb["embed_dim"] != checkpoint_meta["embed_dim"]:
            raise SchemaError(
                f"{name} embeddings have dimension {emb['embed_dim']} but the "
                f"checkpoint was trained at {checkpoint_meta['embed_dim']}"
            )
        if emb["checkpoint_id"] != checkpoint_meta["checkpoint_id"]:
            raise SchemaError(
                f"{name} embeddings come from checkpoint {emb['checkpoint_id']}, "
                f"not the run's {checkpoint_meta['checkpoint_id']}"
            )

    thresholds: dict[str, dict] = {"embedding": {}, "baseline": {}}
    fitted: dict[str, FittedDetector] = {}
    rows: list[str] = []
    eval_ids = list(zip(eval_emb["track_id"], eval_emb["scene_id"]))
    for k, kind in enumerate(DETECTOR_KINDS):
        detector = fit_detector(
            kind,
            train_emb["summary"],
            seed=stage_seed(config.seed, _STAGE_DETECT, k),
            quantile=det_cfg.quantile,
            lof_neighbors=det_cfg.lof_neighbors,
            gmm_components=det_cfg.gmm_components,
            abod_max_reference=det_cfg.abod_max_reference,
        )
        fitted[kind] = detector
        scores = detector.score_many(eval_emb["summary"])
        rows.extend(_score_rows(eval_ids, eval_emb["label"], detector, scores))
        thresholds["embedding"][kind] = {
            "threshold": float(detector.threshold),
            "quantile": float(detector.quantile),
        }
        _say(echo, f"detect: embedding/{kind} scored {len(scores)} tracks")
    _write_csv(scores_dir / "embedding.csv", _SCORE_HEADER, rows)

    # severity sweep (embedding space, one detector) ---------------------------
    severity_detector = fitted[config.evaluation.severity_detector]
    severity_rows: list[str] = []
    for k, mu in enumerate(config.evaluation.severity_means):
        emb = load_embeddings(embeddings_dir / f"{_severity_name(k)}.npz")
        if emb["checkpoint_id"] != checkpoint_meta["checkpoint_id"]:
            raise SchemaError(
                f"severity embeddings {k} come from a different checkpoint"
            )
        scores = severity_detector.score_many(emb["summary"])
        predictions = severity_detector.predict(scores)
        for track_id, scene_id, label, score, pred in zip(
            emb["track_id"], emb["scene_id"], emb["label"], scores, predictions
        ):
            severity_rows.append(
                f"{mu!r},{track_id},{scene_id},{int(label)},"
                f"{severity_detector.kind},{float(score)!r},{int(pred)}"
            )
    _write_csv(
        scores_dir / "severity.csv",
        "mu," + _SCORE_HEADER,
        severity_rows,
    )

    # raw-feature baseline ------------------------------------------------------
    dataset_dir = run_dir / "dataset"
    train_tracks = load_tracks(dataset_dir / "train.ndjson")
    eval_tracks = load_tracks(dataset_dir / "eval.ndjson")
    stats = fit_stats(train_tracks)
    train_matrix = baseline_matrix(train_tracks, stats)
    eval_matrix = baseline_matrix(eval_tracks, stats)
    eval_labels = np.array(
        [-1 if t.label is None else t.label for t in eval_tracks], dtype=np.int64
    )
    baseline_ids = [(t.track_id, t.scene_id) for t in eval_tracks]
    rows = []
    for k, kind in enumerate(DETECTOR_KINDS):
        detector = fit_detector(
            kind,
            train_matrix,
            seed=stage_seed(config.seed, _STAGE_DETECT, k),
            quantile=det_cfg.quantile,
            lof_neighbors=det_cfg.lof_neighbors,
            gmm_components=det_cfg.gmm_components,
            abod_max_reference=det_cfg.abod_max_reference,
        )
        scores = detector.score_many(eval_matrix)
        rows.extend(_score_rows(baseline_ids, eval_labels, detector, scores))
        thresholds["baseline"][kind] = {
            "threshold": float(detector.threshold),
            "quantile": float(detector.quantile),
        }
        _say(echo, f"detect: baseline/{kind} scored {len(scores)} tracks")
    _write_csv(scores_dir / "baseline.csv", _SCORE_HEADER, rows)

    (scores_dir / "thresholds.json").write_text(
        json.dumps(thresholds, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _read_score_csv(path: Path, with_mu: bool = False) -> dict:
    """Parse a scores CSV into {detector: {...}} (or {mu: ...} when nested)."""
    if not path.exists():
        raise DomainError(f"score file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    expected = ("mu," + _SCORE_HEADER) if with_mu else _SCORE_HEADER
    if not lines or lines[0] != expected:
        raise SchemaError(f"{path}: unexpected header {lines[0] if lines else ''!r}")
    out: dict = {}
    for line in lines[1:]:
        parts = line.split(",")
        mu = None
        if with_mu:
            mu, parts = float(parts[0]), parts[1:]
        track_id, scene_id, label, kind, score, prediction = parts
        bucket = out.setdefault(mu, {}) if with_mu else out
        entry = bucket.setdefault(
            kind, {"labels": [], "scores": [], "predictions": []}
        )
        entry["labels"].append(-1 if label == "" else int(label))
        entry["scores"].append(float(score))
        entry["predictions"].append(int(prediction))
    return out


def _sanitize(value):
    """JSON-ready floats: non-finite values become strings."""
    if isinstance(value, float):
        if np.isfinite(value):
            return value
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    return value


def _detector_report(scores: np.ndarray, labels: np.ndarray, threshold: float) -> dict:
    curve = roc_curve(scores, labels)
    youden = youden_threshold(scores, labels)
    return {
        "auroc": float(auroc(scores, labels)),
        "fpr_at_tpr95": float(fpr_at_tpr(scores, labels, 0.95)),
        "tpr_at_fpr5": float(tpr_at_fpr(scores, labels, 0.05)),
        "tpr_at_fpr1": float(tpr_at_fpr(scores, labels, 0.01)),
        "calibrated": confusion_metrics(scores, labels, threshold),
        "youden": confusion_metrics(scores, labels, youden),
        "roc": {
            "fpr": [float(v) for v in curve.fpr],
            "tpr": [float(v) for v in curve.tpr],
            "thresholds": [float(v) for v in curve.thresholds],
        },
    }


def _histogram_table(groups: dict[str, np.ndarray], bins: int) -> dict:
    table = score_histogram(groups, bins=bins)
    return {
        "bin_edges": [float(v) for v in table["bin_edges"]],
        "counts": {
            name: [int(c) for c in counts] for name, counts in table["counts"].items()
        },
    }


def _hist_csv_rows(table: dict) -> list[str]:
    edges = table["bin_edges"]
    names = sorted(table["counts"])
    rows = []
    for i in range(len(edges) - 1):
        counts = ",".join(str(table["counts"][name][i]) for name in names)
        rows.append(f"{edges[i]!r},{edges[i + 1]!r},{counts}")
    return rows


_PLOT_SCRIPT = """\
# gnuplot script for the run's figure data (run from the report directory):
#   gnuplot plots.gp
set datafile separator comma
set key bottom right
set terminal pngcairo size 900,700

set output "roc-embedding.png"
set xlabel "false positive rate"
set ylabel "true positive rate"
plot "roc-embedding-abod.csv" using 2:3 skip 1 with steps title "ABOD", \\
     "roc-embedding-lof.csv" using 2:3 skip 1 with steps title "LOF", \\
     "roc-embedding-gmm.csv" using 2:3 skip 1 with steps title "GMM", \\
     x dashtype 2 lc "gray" title "chance"

set output "roc-baseline.png"
plot "roc-baseline-abod.csv" using 2:3 skip 1 with steps title "ABOD (raw)", \\
     "roc-baseline-lof.csv" using 2:3 skip 1 with steps title "LOF (raw)", \\
     "roc-baseline-gmm.csv" using 2:3 skip 1 with steps title "GMM (raw)", \\
     x dashtype 2 lc "gray" title "chance"

set output "severity-hist.png"
set style data histeps
set xlabel "anomaly score"
set ylabel "count"
stats "severity-hist.csv" skip 1 nooutput
plot for [col=3:STATS_columns] "severity-hist.csv" \\
     using (0.5*($1+$2)):col skip 1 title columnheader(col)
"""


def cmd_evaluate(run_dir: str | Path, echo: Echo | None = None) -> dict:
    """Turn score files into the evaluation report and figure CSVs."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    scores_dir = run_dir / "scores"
    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    thresholds_path = scores_dir / "thresholds.json"
    if not thresholds_path.exists():
        raise DomainError(f"missing {thresholds_path}; run `detect` first")
    thresholds = json.loads(thresholds_path.read_text(encoding="utf-8"))
    by_rep = {
        "embedding": _read_score_csv(scores_dir / "embedding.csv"),
        "baseline": _read_score_csv(scores_dir / "baseline.csv"),
    }

    metrics: dict = {}
    histograms: dict = {}
    bins = config.evaluation.histogram_bins
    for rep, by_detector in by_rep.items():
        metrics[rep] = {}
        histograms[rep] = {}
        for kind in DETECTOR_KINDS:
            if kind not in by_detector:
                raise SchemaError(f"{rep} scores are missing detector {kind!r}")
            entry = by_detector[kind]
            scores = np.asarray(entry["scores"])
            labels = np.asarray(entry["labels"])
            threshold = float(thresholds[rep][kind]["threshold"])
            report = _detector_report(scores, labels, threshold)
            metrics[rep][kind] = report
            roc = report["roc"]
            _write_csv(
                report_dir / f"roc-{rep}-{kind}.csv",
                "threshold,fpr,tpr",
                [
                    f"{t!r},{f!r},{p!r}"
                    for t, f, p in zip(roc["thresholds"], roc["fpr"], roc["tpr"])
                ],
            )
            report["roc_csv"] = f"roc-{rep}-{kind}.csv"
            table = _histogram_table(
                {
                    "normal": scores[labels == 0],
                    "anomalous": scores[labels == 1],
                },
                bins,
            )
            histograms[rep][kind] = table
            _write_csv(
                report_dir / f"hist-{rep}-{kind}.csv",
                "bin_lo,bin_hi," + ",".join(sorted(table["counts"])),
                _hist_csv_rows(table),
            )

    # severity sweep ------------------------------------------------------------
    severity_scores = _read_score_csv(scores_dir / "severity.csv", with_mu=True)
    severity_kind = config.evaluation.severity_detector
    groups: dict[str, np.ndarray] = {}
    medians = []
    for mu in config.evaluation.severity_means:
        entry = severity_scores.get(mu, {}).get(severity_kind)
        if entry is None:
            raise SchemaError(f"severity scores missing mu={mu} for {severity_kind}")
        scores = np.asarray(entry["scores"])
        labels = np.asarray(entry["labels"])
        anomalous = scores[labels == 1]
        groups[_mu_label(mu)] = anomalous
        medians.append(float(np.median(anomalous)))
        if "normal" not in groups:
            groups["normal"] = scores[labels == 0]
    severity_table = _histogram_table(groups, bins)
    _write_csv(
        report_dir / "severity-hist.csv",
        "bin_lo,bin_hi," + ",".join(sorted(severity_table["counts"])),
        _hist_csv_rows(severity_table),
    )
    severity = {
        "detector": severity_kind,
        "means": [float(m) for m in config.evaluation.severity_means],
        "median_anomalous_scores": medians,
        "strictly_increasing": bool(
            all(b > a for a, b in zip(medians, medians[1:]))
        ),
    }

    dataset_meta = json.loads(
        (run_dir / "dataset" / "meta.json").read_text(encoding="utf-8")
    )
    embedding_stats = json.loads(
        (run_dir / "embeddings" / "stats.json").read_text(encoding="utf-8")
    )
    eval_labels = np.asarray(by_rep["embedding"][DETECTOR_KINDS[0]]["labels"])
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "dataset": {
            "n_train_tracks": dataset_meta["n_train_tracks"],
            "n_test_tracks": dataset_meta["n_test_tracks"],
            "n_eval_tracks": int(eval_labels.size),
            "n_anomalous": int((eval_labels == 1).sum()),
        },
        "embedding_stats": embedding_stats,
        "metrics": metrics,
        "histograms": histograms,
        "severity": severity,
    }
    (report_dir / "report.json").write_text(
        json.dumps(_sanitize(report), sort_keys=True, indent=2, allow_nan=False) + "\n",
        encoding="utf-8",
    )
    (report_dir / "plots.gp").write_text(_PLOT_SCRIPT, encoding="utf-8")
    _say(echo, f"evaluate: report written to {report_dir / 'report.json'}")
    return report


# ---------------------------------------------------------------------------
# reproduce: the full experiment at n seeds
# ---------------------------------------------------------------------------

_TABLE_ROWS = (
    ("baseline", "baseline", "lof"),
    ("abod", "embedding", "abod"),
    ("lof", "embedding", "lof"),
    ("gmm", "embedding", "gmm"),
)
_TABLE_COLUMNS = ("AUROC", "F1", "MCC", "Acc", "FPR95", "TPR5", "TPR1")


def _table_cells(report: dict) -> dict[str, dict[str, float]]:
    """Extract one run's table row values from its report dict."""
    out = {}
    for row_name, rep, kind in _TABLE_ROWS:
        m = report["metrics"][rep][kind]
        out[row_name] = {
            "AUROC": m["auroc"],
            "F1": m["calibrated"]["f1"],
            "MCC": m["calibrated"]["mcc"],
            "Acc": m["calibrated"]["accuracy"],
            "FPR95": m["fpr_at_tpr95"],
            "TPR5": m["tpr_at_fpr5"],
            "TPR1": m["tpr_at_fpr1"],
        }
    return out


def run_all_stages(config: PipelineConfig, run_dir: Path, echo: Echo | None = None) -> dict:
    """simulate → inject → train → embed → detect → evaluate for one seed."""
    cmd_simulate(config, run_dir, echo)
    cmd_inject(run_dir, echo)
    cmd_train(run_dir, echo)
    cmd_embed(run_dir, echo)
    cmd_detect(run_dir, echo)
    return cmd_evaluate(run_dir, echo)


def _run_seed_worker(payload: tuple[dict, str]) -> None:
    """Subprocess entry for one constituent run (quiet)."""
    config_data, sub_dir = payload
    run_all_stages(config_from_dict(config_data), Path(sub_dir), None)


def cmd_reproduce(
    config: PipelineConfig,
    run_dir: str | Path,
    echo: Echo | None = None,
    workers: int = 1,
) -> dict:
    """Run the whole experiment across ``n_seeds`` seeds and aggregate.

    Each constituent run gets its own subdirectory ``seed-<i>`` and a global
    seed derived from the configured one (see the seed fan-out rule).  The
    aggregate table reports mean ± sample standard deviation per detector;
    F1/MCC/accuracy are taken at the calibrated train-quantile threshold.
    The ``baseline`` row is LOF on raw features — the strongest raw-feature
    detector in our experiments.

    ``workers > 1`` runs the constituent seeds as parallel subprocesses.
    Outputs are byte-identical to the serial schedule: every sub-run writes
    only its own directory and the aggregate is computed from the per-seed
    report files after all of them finish.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot_path(run_dir).write_text(dump_config(config), encoding="utf-8")

    jobs: list[tuple[PipelineConfig, Path]] = []
    for i in range(config.n_seeds):
        sub_config = replace(config, seed=stage_seed(config.seed, _STAGE_RUN, i))
        jobs.append((sub_config, run_dir / f"seed-{i}"))

    if workers > 1:
        import multiprocessing

        _say(echo, f"reproduce: {config.n_seeds} runs across "
                   f"{min(workers, config.n_seeds)} worker processes")
        payloads = [(cfg.to_dict(), str(sub)) for cfg, sub in jobs]
        context = multiprocessing.get_context("spawn")
        with context.Pool(min(workers, config.n_seeds)) as pool:
            pool.map(_run_seed_worker, payloads)
        _say(echo, "reproduce: all runs finished")
        per_seed = [
            _table_cells(json.loads((sub / "report" / "report.json").read_text()))
            for _, sub in jobs
        ]
    else:
        per_seed = []
        for i, (sub_config, sub_dir) in enumerate(jobs):
            _say(echo, f"reproduce: run {i + 1}/{config.n_seeds} "
                       f"(seed {sub_config.seed}) in {sub_dir}")
            report = run_all_stages(sub_config, sub_dir, echo)
            per_seed.append(_table_cells(report))

    aggregate: dict = {
        "n_seeds": config.n_seeds,
        "columns": list(_TABLE_COLUMNS),
        "rows": {},
    }
    for row_name, _, _ in _TABLE_ROWS:
        aggregate["rows"][row_name] = {}
        for column in _TABLE_COLUMNS:
            values = [cells[row_name][column] for cells in per_seed]
            mean = float(np.mean(values))
            std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            aggregate["rows"][row_name][column] = {
                "mean": mean,
                "std": std,
                "values": [float(v) for v in values],
            }

    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "aggregate.json").write_text(
        json.dumps(_sanitize(aggregate), sort_keys=True, indent=2, allow_nan=False)
        + "\n",
        encoding="utf-8",
    )

    width = max(len(r) for r, _, _ in _TABLE_ROWS) + 2
    lines = ["".ljust(width) + "  ".join(f"{c:>15}" for c in _TABLE_COLUMNS)]
    for row_name, _, _ in _TABLE_ROWS:
        cells = []
        for column in _TABLE_COLUMNS:
            cell = aggregate["rows"][row_name][column]
            cells.append(f"{cell['mean']:.3f} ± {cell['std']:.3f}")
        lines.append(row_name.ljust(width) + "  ".join(f"{c:>15}" for c in cells))
    table_text = "\n".join(lines) + "\n"
    (report_dir / "table.txt").write_text(table_text, encoding="utf-8")

    csv_rows = []
    for row_name, _, _ in _TABLE_ROWS:
        for column in _TABLE_COLUMNS:
            cell = aggregate["rows"][row_name][column]
            csv_rows.append(f"{row_name},{column},{cell['mean']!r},{cell['std']!r}")
    _write_csv(report_dir / "table.csv", "detector,metric,mean,std", csv_rows)

    return aggregate
