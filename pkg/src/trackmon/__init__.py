"""Latent-space monitoring of perceived object tracks.

The package simulates multi-object traffic scenes, injects single-timestep
feature errors, learns a self-supervised track embedding by masked-timestep
prediction, and flags anomalous objects with classical outlier detectors
(angle-variance, local outlier factor, Gaussian mixture) on the max-pooled
latent tokens.
"""

from trackmon.objects import (
    DT_SECONDS,
    DomainError,
    FEATURE_NAMES,
    LabeledDataset,
    NormStats,
    ObjectList,
    ObjectState,
    ObjectTrack,
    SchemaError,
    T_MIN,
    fit_stats,
    load_object_lists,
    load_tracks,
    save_object_lists,
    save_tracks,
    standardize,
    to_feature_matrix,
)

__all__ = [
    "DT_SECONDS",
    "DomainError",
    "FEATURE_NAMES",
    "LabeledDataset",
    "NormStats",
    "ObjectList",
    "ObjectState",
    "ObjectTrack",
    "SchemaError",
    "T_MIN",
    "fit_stats",
    "load_object_lists",
    "load_tracks",
    "save_object_lists",
    "save_tracks",
    "standardize",
    "to_feature_matrix",
]

__version__ = "0.1.0"
