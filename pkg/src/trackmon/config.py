"""Experiment configuration: one strict, JSON-serializable tree.

A :class:`PipelineConfig` bundles every stage's settings — simulator,
error model, training, detector, evaluation — plus the single global seed
that all stage seeds are derived from.  Parsing is strict: unknown keys,
type mismatches, and missing required keys fail with the offending dotted
path.  The nested ``simulator.seed`` and ``training.seed`` fields are
managed by the pipeline's seed fan-out and may not be set in config files.

Command lines override entries with dotted names, e.g.
``--set training.epochs=40`` or ``--set simulator.speed_max=7.5``; values
parse as JSON when possible and as plain strings otherwise.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from trackmon.configbase import from_plain_dict, to_plain_dict
from trackmon.inject import ErrorSpec
from trackmon.jepa import TrainConfig
from trackmon.objects import DomainError, SchemaError
from trackmon.simulate import SceneConfig


@dataclass(frozen=True)
class ErrorModelConfig:
    """Which feature error to inject when building the labeled eval set."""

    feature: str = "v"
    mu: float = 5.0
    sigma: float = 0.1
    paired: bool = False

    def __post_init__(self):
        self.spec()  # delegate feature/sigma validation

    def spec(self, mu: float | None = None) -> ErrorSpec:
        """The injection spec, optionally with a substituted mean."""
        return ErrorSpec(self.feature, self.mu if mu is None else mu, self.sigma)


@dataclass(frozen=True)
class DetectorConfig:
    """Outlier-detector settings shared by embedding and baseline paths."""

    lof_neighbors: int = 15
    gmm_components: int = 5
    abod_max_reference: int = 500
    quantile: float = 0.99

    def __post_init__(self):
        if self.lof_neighbors < 1:
            raise DomainError("lof_neighbors must be >= 1")
        if self.gmm_components < 1:
            raise DomainError("gmm_components must be >= 1")
        if self.abod_max_reference < 3:
            raise DomainError("abod_max_reference must be >= 3")
        if not (0.0 < self.quantile < 1.0):
            raise DomainError(f"quantile must lie in (0, 1), got {self.quantile}")


@dataclass(frozen=True)
class EvaluationConfig:
    """Report shape: histogram binning and the severity-sweep means."""

    histogram_bins: int = 30
    severity_means: tuple[float, ...] = (2.5, 5.0, 7.5)
    severity_detector: str = "lof"

    def __post_init__(self):
        if self.histogram_bins < 1:
            raise DomainError("histogram_bins must be >= 1")
        if len(self.severity_means) < 2:
            raise DomainError("severity sweep needs at least two means")
        if any(b <= a for a, b in zip(self.severity_means, self.severity_means[1:])):
            raise DomainError("severity_means must be strictly increasing")
        if self.severity_detector not in ("abod", "lof", "gmm"):
            raise DomainError(
                f"severity_detector must be one of abod/lof/gmm, "
                f"got {self.severity_detector!r}"
            )


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one experiment run needs, under a single global seed."""

    seed: int = 0
    n_seeds: int = 5
    n_train_scenes: int = 420
    n_test_scenes: int = 132
    simulator: SceneConfig = field(default_factory=SceneConfig)
    error_model: ErrorModelConfig = field(default_factory=ErrorModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise DomainError("seed must be non-negative")
        if self.n_seeds < 1:
            raise DomainError("n_seeds must be >= 1")
        if self.n_train_scenes < 1 or self.n_test_scenes < 1:
            raise DomainError("scene counts must be >= 1")

    def to_dict(self) -> dict:
        """Plain dict with derived per-stage seeds stripped.

        ``simulator.seed`` and ``training.seed`` are always overwritten by
        the pipeline's seed fan-out, so they are not part of the config
        surface; stripping them keeps ``dump_config`` output loadable by
        ``config_from_dict``.
        """
        data = to_plain_dict(self)
        for section in _SEEDED_SECTIONS:
            data[section].pop("seed", None)
        return data


_SEEDED_SECTIONS = ("simulator", "training")


def config_from_dict(data: dict) -> PipelineConfig:
    """Strictly parse a plain dict (e.g. loaded JSON) into a PipelineConfig."""
    if not isinstance(data, dict):
        raise SchemaError("config: expected a JSON object at the top level")
    for section in _SEEDED_SECTIONS:
        inner = data.get(section)
        if isinstance(inner, dict) and "seed" in inner:
            raise SchemaError(
                f"config.{section}.seed is derived from the global seed "
                "and cannot be set directly"
            )
    return from_plain_dict(PipelineConfig, data)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise DomainError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config {path}: invalid JSON: {exc.msg}") from exc
    return config_from_dict(data)


def dump_config(config: PipelineConfig) -> str:
    """Canonical JSON text of a config (stable across runs for snapshots)."""
    return json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n"


class UsageError(Exception):
    """A malformed command-line value (as opposed to bad config content)."""


def apply_overrides(data: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a plain config dict.

    Values are parsed as JSON when valid (numbers, booleans, lists) and
    taken as literal strings otherwise.  Returns a new dict; the input is
    not modified.  A string without ``=`` is a :class:`UsageError` (the
    flag itself is malformed); a bad key path is a :class:`DomainError`
    (the config content is wrong), matching the CLI's exit-code split.
    """
    out = copy.deepcopy(data)
    for assignment in assignments:
        name, sep, raw = assignment.partition("=")
        if not sep or not name:
            raise UsageError(
                f"override {assignment!r} must have the form key=value"
            )
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = name.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise DomainError(
                    f"override {name!r} descends into non-section key {part!r}"
                )
        node[parts[-1]] = value
    return out
