"""Synthetic perception scenes with known object kinematics.

Every simulated traffic participant follows one sampled motion model —
constant velocity or constant turn rate (leftover mix probability yields
stationary objects) — integrated in closed form at the 0.5 s sampling step.
The ideal states are then observed through additive zero-mean Gaussian noise
per feature; speed is clamped at zero and heading re-wrapped.  Geometric
per-step truncation may end a track before the scene does, emulating limited
sensor visibility, and tracks that end up shorter than ``T_MIN`` timesteps
are discarded.

Determinism: every scene is generated from a seed derived only from the
configured seed and the scene id, so regenerating any scene — alone or as
part of a dataset — yields identical tracks.  Noise values are drawn after
the ideal rollout of each track, so two runs that differ only in noise
levels share the same underlying ideal paths.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from trackmon.objects import (
    DT_SECONDS,
    DomainError,
    LabeledDataset,
    ObjectList,
    ObjectState,
    ObjectTrack,
    T_MIN,
    wrap_angle,
)

MODEL_CONSTANT_VELOCITY = "cv"
MODEL_CONSTANT_TURN = "ct"
MODEL_STATIONARY = "stationary"

_MAX_SCENE_RETRIES = 100


@dataclass(frozen=True)
class SceneConfig:
    """Generator parameters for one scene draw."""

    duration_steps: int = 40
    n_objects_min: int = 3
    n_objects_max: int = 8
    p_constant_velocity: float = 0.7
    p_constant_turn: float = 0.3
    speed_min: float = 0.0
    speed_max: float = 15.0
    turn_rate_min: float = -0.3
    turn_rate_max: float = 0.3
    position_range: float = 50.0
    noise_std_x: float = 0.2
    noise_std_y: float = 0.2
    noise_std_v: float = 0.2
    noise_std_psi: float = 0.02
    truncation_prob: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.duration_steps < T_MIN:
            raise DomainError(
                f"scene duration {self.duration_steps} is below the minimum "
                f"track length {T_MIN}"
            )
        if not (1 <= self.n_objects_min <= self.n_objects_max):
            raise DomainError("need 1 <= n_objects_min <= n_objects_max")
        for name in ("p_constant_velocity", "p_constant_turn"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise DomainError(f"{name} must lie in [0, 1], got {p}")
        if self.p_constant_velocity + self.p_constant_turn > 1.0 + 1e-12:
            raise DomainError("motion-model probabilities must sum to at most 1")
        if not (0.0 <= self.speed_min <= self.speed_max):
            raise DomainError("need 0 <= speed_min <= speed_max")
        if self.turn_rate_min > self.turn_rate_max:
            raise DomainError("need turn_rate_min <= turn_rate_max")
        if self.position_range <= 0.0:
            raise DomainError("position_range must be positive")
        for name in ("noise_std_x", "noise_std_y", "noise_std_v", "noise_std_psi"):
            if getattr(self, name) < 0.0:
                raise DomainError(f"{name} must be non-negative")
        if not (0.0 <= self.truncation_prob < 1.0):
            raise DomainError("truncation_prob must lie in [0, 1)")


@dataclass(frozen=True)
class TrackTruth:
    """Ground-truth sample behind one generated track (for verification)."""

    model: str
    x0: float
    y0: float
    v: float
    psi0: float
    omega: float
    length: int


def scene_seed_sequence(seed: int, scene_id: str, attempt: int = 0) -> np.random.SeedSequence:
    """Seed derivation rule: configured seed + CRC32 of the scene id."""
    return np.random.SeedSequence([seed, zlib.crc32(scene_id.encode("utf-8")), attempt])


def ideal_rollout(
    x0: float, y0: float, v: float, psi0: float, omega: float, length: int
) -> np.ndarray:
    """Closed-form noise-free rollout, one (x, y, v, psi) row per step.

    Constant turn rate follows the usual circular-arc solution; omega == 0
    reduces to straight-line constant velocity.
    """
    k = np.arange(length, dtype=np.float64)
    t = k * DT_SECONDS
    if abs(omega) < 1e-12:
        x = x0 + v * math.cos(psi0) * t
        y = y0 + v * math.sin(psi0) * t
        psi = np.full(length, psi0, dtype=np.float64)
    else:
        psi = psi0 + omega * t
        x = x0 + (v / omega) * (np.sin(psi) - math.sin(psi0))
        y = y0 - (v / omega) * (np.cos(psi) - math.cos(psi0))
    out = np.empty((length, 4), dtype=np.float64)
    out[:, 0] = x
    out[:, 1] = y
    out[:, 2] = v
    out[:, 3] = wrap_angle(psi)
    return out


def _draw_track(
    config: SceneConfig, rng: np.random.Generator
) -> tuple[np.ndarray, TrackTruth] | None:
    """Sample one object; returns None when truncation leaves it too short."""
    u = rng.random()
    if u < config.p_constant_velocity:
        model = MODEL_CONSTANT_VELOCITY
    elif u < config.p_constant_velocity + config.p_constant_turn:
        model = MODEL_CONSTANT_TURN
    else:
        model = MODEL_STATIONARY

    v = 0.0 if model == MODEL_STATIONARY else float(
        rng.uniform(config.speed_min, config.speed_max)
    )
    omega = (
        float(rng.uniform(config.turn_rate_min, config.turn_rate_max))
        if model == MODEL_CONSTANT_TURN
        else 0.0
    )
    x0 = float(rng.uniform(-config.position_range, config.position_range))
    y0 = float(rng.uniform(-config.position_range, config.position_range))
    psi0 = float(rng.uniform(-math.pi, math.pi))

    if config.truncation_prob > 0.0:
        length = min(config.duration_steps, int(rng.geometric(config.truncation_prob)))
    else:
        length = config.duration_steps

    ideal = ideal_rollout(x0, y0, v, psi0, omega, length)
    noisy = ideal.copy()
    stds = (config.noise_std_x, config.noise_std_y, config.noise_std_v, config.noise_std_psi)
    for col, std in enumerate(stds):
        noisy[:, col] += rng.normal(0.0, std, size=length)
    noisy[:, 2] = np.maximum(noisy[:, 2], 0.0)
    noisy[:, 3] = wrap_angle(noisy[:, 3])

    if length < T_MIN:
        return None
    truth = TrackTruth(
        model=model, x0=x0, y0=y0, v=v, psi0=psi0, omega=omega, length=length
    )
    return noisy, truth


def generate_scene_with_truth(
    config: SceneConfig, scene_id: str
) -> tuple[ObjectList, list[TrackTruth]]:
    """Like :func:`generate_scene` but also returns the ground-truth draws.

    A draw where every sampled object is truncated below the minimum length
    is deterministically redrawn (bounded retries) so scenes are never empty.
    """
    for attempt in range(_MAX_SCENE_RETRIES):
        rng = np.random.default_rng(scene_seed_sequence(config.seed, scene_id, attempt))
        n_objects = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
        tracks: list[ObjectTrack] = []
        truths: list[TrackTruth] = []
        for j in range(n_objects):
            drawn = _draw_track(config, rng)
            if drawn is None:
                continue
            noisy, truth = drawn
            states = tuple(
                ObjectState(
                    t=i,
                    x=row[0],
                    y=row[1],
                    v=row[2],
                    psi=row[3],
                )
                for i, row in enumerate(noisy.tolist())
            )
            tracks.append(
                ObjectTrack(track_id=f"obj-{j:02d}", scene_id=scene_id, states=states)
            )
            truths.append(truth)
        if tracks:
            return ObjectList(scene_id=scene_id, tracks=tuple(tracks)), truths
    raise DomainError(
        f"scene {scene_id!r} produced no track of length >= {T_MIN} in "
        f"{_MAX_SCENE_RETRIES} attempts; check duration/truncation settings"
    )


def generate_scene(config: SceneConfig, scene_id: str) -> ObjectList:
    """Generate one scene's object list, deterministically from (seed, scene_id)."""
    scene, _ = generate_scene_with_truth(config, scene_id)
    return scene


def generate_dataset(
    config: SceneConfig,
    n_train_scenes: int,
    n_test_scenes: int,
    seed: int,
) -> LabeledDataset:
    """Generate disjoint train/test scene collections under one dataset seed.

    Scene ids are ``train-%04d`` / ``test-%04d``; each scene derives its own
    rng stream from (seed, scene id), so splits are statistically disjoint.
    All tracks come out untagged.
    """
    if n_train_scenes < 1 or n_test_scenes < 1:
        raise DomainError("need at least one train and one test scene")
    cfg = replace(config, seed=seed)
    train = [generate_scene(cfg, f"train-{i:04d}") for i in range(n_train_scenes)]
    test = [generate_scene(cfg, f"test-{i:04d}") for i in range(n_test_scenes)]
    meta = {
        "generator": {
            k: getattr(cfg, k) for k in SceneConfig.__dataclass_fields__
        },
        "n_train_scenes": n_train_scenes,
        "n_test_scenes": n_test_scenes,
        "seed": seed,
    }
    return LabeledDataset(
        train=tuple(t for scene in train for t in scene.tracks),
        test=tuple(t for scene in test for t in scene.tracks),
        meta=meta,
    )


def expected_tracks_per_scene(config: SceneConfig) -> float:
    """Analytic mean number of surviving tracks in one scene draw.

    An object survives iff its geometric truncation allows at least T_MIN
    steps: probability (1 - p)^(T_MIN - 1).  Conditioning on the redraw of
    empty scenes is a negligible correction at realistic settings and is
    ignored here.
    """
    mean_objects = 0.5 * (config.n_objects_min + config.n_objects_max)
    p_survive = (1.0 - config.truncation_prob) ** (T_MIN - 1)
    return mean_objects * p_survive
