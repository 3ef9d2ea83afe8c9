"""Single-timestep feature-error injection for building labeled eval sets.

An injected error perturbs exactly one feature at one timestep of a track:
the offset is drawn once per track from N(mu, sigma^2), the timestep is
drawn uniformly.  Speed is clamped at zero (and the clamp recorded);
heading is re-wrapped into [-pi, pi).  Everything else in the track is
left untouched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from trackmon.objects import (
    DomainError,
    FEATURE_NAMES,
    ObjectTrack,
    SchemaError,
    wrap_angle,
)

FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}


@dataclass(frozen=True)
class ErrorSpec:
    """Which feature to disturb and the offset distribution N(mu, sigma^2)."""

    feature: str = "v"
    mu: float = 5.0
    sigma: float = 0.1

    def __post_init__(self):
        if self.feature not in FEATURE_INDEX:
            raise DomainError(
                f"unknown feature {self.feature!r}; expected one of {FEATURE_NAMES}"
            )
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise DomainError("error-spec parameters must be finite")
        if self.sigma < 0.0:
            raise DomainError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class InjectionRecord:
    """Audit entry describing one applied perturbation."""

    scene_id: str
    track_id: str
    feature: str
    t: int
    theta: float
    clamped: bool

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "track_id": self.track_id,
            "feature": self.feature,
            "t": self.t,
            "theta": self.theta,
            "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InjectionRecord":
        try:
            return cls(
                scene_id=data["scene_id"],
                track_id=data["track_id"],
                feature=data["feature"],
                t=int(data["t"]),
                theta=float(data["theta"]),
                clamped=bool(data["clamped"]),
            )
        except KeyError as exc:
            raise SchemaError(f"injection record missing key {exc}") from exc


def inject(
    track: ObjectTrack, spec: ErrorSpec, rng: np.random.Generator
) -> tuple[ObjectTrack, InjectionRecord]:
    """Apply one drawn offset to one drawn timestep of ``track``.

    Draw order is fixed (offset first, then timestep index) so results are
    reproducible for a given rng state.
    """
    theta = float(rng.normal(spec.mu, spec.sigma))
    idx = int(rng.integers(0, len(track.states)))
    state = track.states[idx]
    value = getattr(state, spec.feature) + theta
    clamped = False
    if spec.feature == "v" and value < 0.0:
        value = 0.0
        clamped = True
    elif spec.feature == "psi":
        value = wrap_angle(value)
    new_state = replace(state, **{spec.feature: value})
    states = track.states[:idx] + (new_state,) + track.states[idx + 1 :]
    record = InjectionRecord(
        scene_id=track.scene_id,
        track_id=track.track_id,
        feature=spec.feature,
        t=state.t,
        theta=theta,
        clamped=clamped,
    )
    return replace(track, states=states), record


def build_eval_set(
    test_tracks: Sequence[ObjectTrack],
    spec: ErrorSpec,
    seed: int,
    paired: bool = False,
) -> tuple[list[ObjectTrack], list[InjectionRecord]]:
    """Label/perturb test tracks into a balanced evaluation set.

    Non-paired (default): every input track appears exactly once, half of
    them injected and labeled 1, the rest labeled 0 (n//2 anomalies when n
    is odd).  The assignment is keyed on (scene_id, track_id), so permuting
    the input order changes nothing; the output is in that canonical order.

    Paired: every track appears twice, once original (label 0) and once
    injected (label 1, track id suffixed with ``~a``).
    """
    tracks = list(test_tracks)
    if len(tracks) < 2 and not paired:
        raise DomainError("need at least two test tracks for a balanced eval set")
    if not tracks:
        raise DomainError("cannot build an eval set from zero tracks")
    keys = [(t.scene_id, t.track_id) for t in tracks]
    if len(set(keys)) != len(keys):
        raise DomainError("test tracks must have unique (scene_id, track_id)")

    order = sorted(range(len(tracks)), key=lambda i: keys[i])
    rng = np.random.default_rng(np.random.SeedSequence([seed]))

    labeled: list[ObjectTrack] = []
    records: list[InjectionRecord] = []
    if paired:
        for i in order:
            track = tracks[i]
            labeled.append(replace(track, label=0))
            altered, record = inject(track, spec, rng)
            altered = replace(altered, track_id=track.track_id + "~a", label=1)
            labeled.append(altered)
            records.append(
                replace(record, track_id=record.track_id + "~a")
            )
        return labeled, records

    n_anomalous = len(tracks) // 2
    perm = rng.permutation(len(tracks))
    anomalous_positions = set(int(p) for p in perm[:n_anomalous])
    for pos, i in enumerate(order):
        track = tracks[i]
        if pos in anomalous_positions:
            altered, record = inject(track, spec, rng)
            labeled.append(replace(altered, label=1))
            records.append(record)
        else:
            labeled.append(replace(track, label=0))
    return labeled, records


def save_injection_records(records: Sequence[InjectionRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True))
            fh.write("\n")


def load_injection_records(path: str | Path) -> list[InjectionRecord]:
    path = Path(path)
    if not path.exists():
        raise DomainError(f"injection record file not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(InjectionRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {line_no}: invalid JSON: {exc.msg}") from exc
    return records
