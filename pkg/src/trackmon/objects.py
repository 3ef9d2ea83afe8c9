"""Object-track data model, normalization statistics, and NDJSON persistence.

A *track* is the time-ordered state sequence of one perceived traffic
participant.  Feature columns are ordered (x, y, v, psi) throughout the
package: position in a global frame, absolute speed, and heading.  Sampling
is 2 Hz, so consecutive timestep indices are ``DT_SECONDS`` apart.  A fifth
mask-bit column is appended later by the embedding stage; the helpers here
pass such a column through untouched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

T_MIN = 8
N_FEATURES = 4
FEATURE_NAMES = ("x", "y", "v", "psi")
DT_SECONDS = 0.5
TRACK_SCHEMA_VERSION = 1

_RECORD_REQUIRED_KEYS = ("scene_id", "id", "t0", "dt", "states")
_RECORD_ALLOWED_KEYS = frozenset(_RECORD_REQUIRED_KEYS) | {"label"}


class DomainError(ValueError):
    """Input data or configuration violates a documented contract."""


class SchemaError(DomainError):
    """A persisted artifact does not match its expected schema."""


def wrap_angle(psi):
    """Wrap an angle (scalar or ndarray) into [-pi, pi)."""
    wrapped = np.mod(np.asarray(psi, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    if np.ndim(psi) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class ObjectState:
    """One observation of a tracked object at integer timestep ``t``."""

    t: int
    x: float
    y: float
    v: float
    psi: float

    def __post_init__(self):
        if self.t < 0:
            raise DomainError(f"timestep must be non-negative, got {self.t}")
        for name in FEATURE_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"state feature {name!r} must be finite, got {value!r}")
        if self.v < 0.0:
            raise DomainError(f"speed must be non-negative, got {self.v}")
        if not (-math.pi <= self.psi < math.pi):
            raise DomainError(f"heading must lie in [-pi, pi), got {self.psi}")

    def features(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.v, self.psi)


@dataclass(frozen=True)
class ObjectTrack:
    """State sequence of one object, optionally tagged with an anomaly label.

    ``label`` is 1 for anomalous, 0 for normal, and None for untagged tracks
    (training data is always untagged).
    """

    track_id: str
    scene_id: str
    states: tuple[ObjectState, ...]
    label: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if not self.track_id or not self.scene_id:
            raise DomainError("track_id and scene_id must be non-empty")
        if len(self.states) < T_MIN:
            raise DomainError(
                f"track too short: {len(self.states)} states, need >= {T_MIN}"
            )
        steps = [s.t for s in self.states]
        if any(b - a != 1 for a, b in zip(steps, steps[1:])):
            raise DomainError("track timesteps must increase in unit steps")
        if self.label not in (None, 0, 1):
            raise DomainError(f"label must be None, 0 or 1, got {self.label!r}")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def t0(self) -> int:
        return self.states[0].t


@dataclass(frozen=True)
class ObjectList:
    """All tracks perceived in one scene."""

    scene_id: str
    tracks: tuple[ObjectTrack, ...]

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        ids = [t.track_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise DomainError(f"duplicate track ids in scene {self.scene_id!r}")
        for t in self.tracks:
            if t.scene_id != self.scene_id:
                raise DomainError(
                    f"track {t.track_id!r} belongs to scene {t.scene_id!r}, "
                    f"not {self.scene_id!r}"
                )

    def __len__(self) -> int:
        return len(self.tracks)


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean and population standard deviation of a train split."""

    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != N_FEATURES or len(self.std) != N_FEATURES:
            raise DomainError("normalization stats need one entry per feature")
        for name, m, s in zip(FEATURE_NAMES, self.mean, self.std):
            if not (math.isfinite(m) and math.isfinite(s)):
                raise DomainError(f"non-finite normalization stats for {name!r}")
            if s <= 0.0:
                raise DomainError(f"feature {name!r} has non-positive std {s}")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mean, dtype=np.float64), np.asarray(self.std, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        try:
            return cls(mean=tuple(data["mean"]), std=tuple(data["std"]))
        except KeyError as exc:
            raise SchemaError(f"normalization stats missing key {exc}") from exc


@dataclass(frozen=True)
class LabeledDataset:
    """Train/test split; train tracks are untagged by construction."""

    train: tuple[ObjectTrack, ...]
    test: tuple[ObjectTrack, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        for t in self.train:
            if t.label is not None:
                raise DomainError(f"train track {t.track_id!r} carries a label")


# ---------------------------------------------------------------------------
# feature-matrix conversion and normalization
# ---------------------------------------------------------------------------

def to_feature_matrix(track: ObjectTrack) -> np.ndarray:
    """Return the (T, 4) float64 matrix of a track's (x, y, v, psi) rows."""
    if len(track.states) < T_MIN:
        raise DomainError(
            f"track too short: {len(track.states)} states, need >= {T_MIN}"
        )
    return np.array([s.features() for s in track.states], dtype=np.float64)


def track_from_feature_matrix(
    matrix: np.ndarray,
    track_id: str,
    scene_id: str,
    t0: int = 0,
    label: int | None = None,
) -> ObjectTrack:
    """Inverse of :func:`to_feature_matrix` given identity and time offset."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != N_FEATURES:
        raise DomainError(f"expected a (T, {N_FEATURES}) matrix, got {matrix.shape}")
    states = tuple(
        ObjectState(t=t0 + i, x=row[0], y=row[1], v=row[2], psi=row[3])
        for i, row in enumerate(matrix.tolist())
    )
    return ObjectTrack(track_id=track_id, scene_id=scene_id, states=states, label=label)


def fit_stats(tracks: Sequence[ObjectTrack]) -> NormStats:
    """Per-feature mean/std over every timestep of every given track.

    Uses the population standard deviation (ddof=0).  A feature with zero
    variance cannot be standardized and is rejected by name.
    """
    if not tracks:
        raise DomainError("cannot fit normalization stats on an empty track list")
    stacked = np.concatenate([to_feature_matrix(t) for t in tracks], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    for name, s in zip(FEATURE_NAMES, std):
        if s <= 0.0:
            raise DomainError(f"feature {name!r} has zero variance on the train split")
    return NormStats(mean=tuple(mean), std=tuple(std))


def _check_feature_columns(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] not in (N_FEATURES, N_FEATURES + 1):
        raise DomainError(
            f"expected a (T, {N_FEATURES}) or (T, {N_FEATURES + 1}) matrix, "
            f"got shape {features.shape}"
        )
    return features


def standardize(features: np.ndarray, stats: NormStats) -> np.ndarray:
    """Shift/scale the four feature columns; a mask-bit column passes through."""
    features = _check_feature_columns(features)
    mean, std = stats.arrays()
    out = features.copy()
    out[:, :N_FEATURES] = (features[:, :N_FEATURES] - mean) / std
    return out


def destandardize(features: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of :func:`standardize` on the four feature columns."""
    features = _check_feature_columns(features)
    mean, std = stats.arrays()
    out = features.copy()
    out[:, :N_FEATURES] = features[:, :N_FEATURES] * std + mean
    return out


# ---------------------------------------------------------------------------
# NDJSON persistence (one track record per line)
# ---------------------------------------------------------------------------

def _track_to_record(track: ObjectTrack) -> dict:
    record = {
        "scene_id": track.scene_id,
        "id": track.track_id,
        "t0": track.t0,
        "dt": DT_SECONDS,
        "states": [list(s.features()) for s in track.states],
    }
    if track.label is not None:
        record["label"] = track.label
    return record


def _track_from_record(record: dict, line_no: int) -> ObjectTrack:
    if not isinstance(record, dict):
        raise SchemaError(f"line {line_no}: track record must be a JSON object")
    for key in _RECORD_REQUIRED_KEYS:
        if key not in record:
            raise SchemaError(f"line {line_no}: missing required field {key!r}")
    unknown = set(record) - _RECORD_ALLOWED_KEYS
    if unknown:
        raise SchemaError(f"line {line_no}: unknown field(s) {sorted(unknown)}")
    if record["dt"] != DT_SECONDS:
        raise SchemaError(
            f"line {line_no}: expected dt={DT_SECONDS}, got {record['dt']!r}"
        )
    rows = record["states"]
    if not isinstance(rows, list):
        raise SchemaError(f"line {line_no}: 'states' must be a list of rows")
    states = []
    t0 = record["t0"]
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != N_FEATURES:
            got = len(row) if isinstance(row, list) else type(row).__name__
            raise SchemaError(
                f"line {line_no}: states row {i} must have {N_FEATURES} entries "
                f"(x, y, v, psi); got {got}"
            )
        try:
            states.append(
                ObjectState(t=t0 + i, x=row[0], y=row[1], v=row[2], psi=row[3])
            )
        except (DomainError, TypeError) as exc:
            raise SchemaError(f"line {line_no}: invalid states row {i}: {exc}") from exc
    try:
        return ObjectTrack(
            track_id=record["id"],
            scene_id=record["scene_id"],
            states=tuple(states),
            label=record.get("label"),
        )
    except DomainError as exc:
        raise SchemaError(f"line {line_no}: {exc}") from exc


def save_tracks(tracks: Iterable[ObjectTrack], path: str | Path) -> None:
    """Write tracks as newline-delimited JSON, one record per track.

    Floats serialize with full round-trip precision (the default ``repr``
    formatting), so a save/load cycle is lossless.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for track in tracks:
            fh.write(json.dumps(_track_to_record(track), sort_keys=True))
            fh.write("\n")


def load_tracks(path: str | Path) -> list[ObjectTrack]:
    """Read tracks from NDJSON; malformed records fail with their line number."""
    path = Path(path)
    if not path.exists():
        raise DomainError(f"track file not found: {path}")
    tracks = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {line_no}: invalid JSON: {exc.msg}") from exc
            tracks.append(_track_from_record(record, line_no))
    return tracks


def save_object_lists(lists: Iterable[ObjectList], path: str | Path) -> None:
    """Persist scene-grouped tracks; scene structure is recoverable on load."""
    save_tracks((t for ol in lists for t in ol.tracks), path)


def load_object_lists(path: str | Path) -> list[ObjectList]:
    """Load NDJSON tracks and regroup them by scene in first-seen order."""
    return group_into_lists(load_tracks(path))


def group_into_lists(tracks: Sequence[ObjectTrack]) -> list[ObjectList]:
    by_scene: dict[str, list[ObjectTrack]] = {}
    for track in tracks:
        by_scene.setdefault(track.scene_id, []).append(track)
    return [ObjectList(scene_id=sid, tracks=tuple(ts)) for sid, ts in by_scene.items()]


def strip_label(track: ObjectTrack) -> ObjectTrack:
    return replace(track, label=None) if track.label is not None else track
