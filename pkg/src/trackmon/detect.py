"""Outlier scoring of fixed-size vectors, plus the track summaries they eat.

Three classical detectors share one orientation — higher score means more
anomalous — and one calibration rule (score quantile of the train split):

* angle-variance (ABOD): negated distance-weighted variance of the angle
  spectrum a query spans with all train-point pairs; outliers see the rest
  of the data under a narrow cone, hence low variance;
* local outlier factor (LOF): ratio of the query's local reachability
  density to its neighbors' densities;
* Gaussian mixture (GMM): negative log-likelihood under a diagonal-
  covariance mixture fitted by EM.

Track vectors are either the per-dimension maximum over a track's latent
tokens (``summarize``) or, for the raw-feature baseline, the standardized
feature matrix padded/truncated to a fixed length and flattened.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trackmon.objects import (
    DomainError,
    N_FEATURES,
    NormStats,
    ObjectTrack,
    standardize,
    to_feature_matrix,
)

DISTANCE_FLOOR = 1e-12
BASELINE_LENGTH = 40


def summarize(embedding: np.ndarray) -> np.ndarray:
    """Per-dimension maximum over a track's latent tokens: (T, D) -> (D,)."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 2 or embedding.shape[0] < 1:
        raise DomainError(f"expected a non-empty (T, D) embedding, got {embedding.shape}")
    return embedding.max(axis=0)


def _as_matrix(x: np.ndarray, dim: int | None = None, name: str = "points") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DomainError(f"{name} must be a non-empty 2-d array, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise DomainError(f"{name} must have dimension {dim}, got {x.shape[1]}")
    if not np.isfinite(x).all():
        raise DomainError(f"{name} contain non-finite values")
    return x


def _chunked_distances(queries: np.ndarray, points: np.ndarray, chunk: int = 64):
    """Yield (start, distance block) with exact elementwise differences."""
    for lo in range(0, queries.shape[0], chunk):
        block = queries[lo : lo + chunk]
        diff = block[:, None, :] - points[None, :, :]
        yield lo, np.sqrt((diff**2).sum(axis=2))


# ---------------------------------------------------------------------------
# angle-variance detector
# ---------------------------------------------------------------------------

class AbodDetector:
    """Angle-spectrum variance scoring against a train reference set.

    For a query q and train pair (a, b) the base term is
    <a-q, b-q> / (|a-q|^2 |b-q|^2); the score is the negated variance of
    those terms over all pairs, each weighted by 1 / (|a-q| |b-q|).  With
    more than ``max_reference`` train points a seeded uniform subsample
    keeps the pairwise cost bounded.
    """

    kind = "abod"

    def __init__(self, reference: np.ndarray):
        self.reference = _as_matrix(reference, name="reference points")
        if self.reference.shape[0] < 3:
            raise DomainError("angle-variance scoring needs at least 3 reference points")

    @classmethod
    def fit(
        cls,
        train: np.ndarray,
        max_reference: int = 500,
        seed: int = 0,
    ) -> "AbodDetector":
        train = _as_matrix(train, name="train points")
        if max_reference < 3:
            raise DomainError("max_reference must be at least 3")
        if train.shape[0] > max_reference:
            rng = np.random.default_rng(np.random.SeedSequence([seed]))
            keep = np.sort(rng.choice(train.shape[0], size=max_reference, replace=False))
            train = train[keep]
        return cls(train)

    def score(self, query: np.ndarray) -> float:
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.shape[0] != self.reference.shape[1]:
            raise DomainError(
                f"query dimension {query.shape[0]} does not match reference "
                f"dimension {self.reference.shape[1]}"
            )
        diff = self.reference - query[None, :]
        sq = (diff**2).sum(axis=1)
        keep = sq > DISTANCE_FLOOR**2
        diff = diff[keep]
        sq = sq[keep]
        n = diff.shape[0]
        if n < 2:
            warnings.warn(
                "query coincides with nearly all reference points; emitting the "
                "maximal anomaly score",
                RuntimeWarning,
                stacklevel=2,
            )
            return 0.0
        dots = diff @ diff.T
        denom = sq[:, None] * sq[None, :]
        terms = dots / denom
        weights = 1.0 / np.sqrt(denom)
        off = ~np.eye(n, dtype=bool)
        w = weights[off]
        x = terms[off]
        total = w.sum()
        mean = (w * x).sum() / total
        second = (w * x**2).sum() / total
        return -max(second - mean**2, 0.0)

    def score_many(self, queries: np.ndarray) -> np.ndarray:
        queries = _as_matrix(queries, dim=self.reference.shape[1], name="queries")
        return np.array([self.score(q) for q in queries])


# ---------------------------------------------------------------------------
# local outlier factor
# ---------------------------------------------------------------------------

class LofDetector:
    """Classic k-nearest-neighbor density-ratio scoring.

    Fitting precomputes each train point's k-distance, neighborhood (all
    points within the k-distance, self excluded), and local reachability
    density.  Queries are scored against the train set as external points;
    zero distances are floored so duplicate points stay finite.
    """

    kind = "lof"

    def __init__(
        self,
        train: np.ndarray,
        k_distance: np.ndarray,
        lrd: np.ndarray,
        n_neighbors: int,
    ):
        self.train = train
        self.k_distance = k_distance
        self.lrd = lrd
        self.n_neighbors = n_neighbors

    @classmethod
    def fit(cls, train: np.ndarray, n_neighbors: int = 15) -> "LofDetector":
        train = _as_matrix(train, name="train points")
        n = train.shape[0]
        if not (1 <= n_neighbors < n):
            raise DomainError(
                f"n_neighbors must lie in [1, {n - 1}] for {n} train points"
            )
        k_distance = np.empty(n)
        neighborhoods: list[np.ndarray] = []
        dist_rows: list[np.ndarray] = []
        for lo, block in _chunked_distances(train, train):
            for r, row in enumerate(block):
                i = lo + r
                row = row.copy()
                row[i] = np.inf  # exclude self
                kth = np.partition(row, n_neighbors - 1)[n_neighbors - 1]
                k_distance[i] = kth
                neighborhoods.append(np.flatnonzero(row <= kth))
                dist_rows.append(row)
        lrd = np.empty(n)
        for i in range(n):
            nb = neighborhoods[i]
            reach = np.maximum(k_distance[nb], dist_rows[i][nb])
            lrd[i] = 1.0 / max(reach.mean(), DISTANCE_FLOOR)
        return cls(train, k_distance, lrd, n_neighbors)

    def score_many(self, queries: np.ndarray) -> np.ndarray:
        queries = _as_matrix(queries, dim=self.train.shape[1], name="queries")
        out = np.empty(queries.shape[0])
        for lo, block in _chunked_distances(queries, self.train):
            for r, row in enumerate(block):
                kth = np.partition(row, self.n_neighbors - 1)[self.n_neighbors - 1]
                nb = np.flatnonzero(row <= kth)
                reach = np.maximum(self.k_distance[nb], row[nb])
                lrd_q = 1.0 / max(reach.mean(), DISTANCE_FLOOR)
                out[lo + r] = self.lrd[nb].mean() / lrd_q
        return out

    def score(self, query: np.ndarray) -> float:
        return float(self.score_many(np.asarray(query, dtype=np.float64)[None, :])[0])

    def train_scores(self) -> np.ndarray:
        """LOF of the train points themselves (self excluded, as in fitting)."""
        out = np.empty(self.train.shape[0])
        for lo, block in _chunked_distances(self.train, self.train):
            for r, row in enumerate(block):
                i = lo + r
                row = row.copy()
                row[i] = np.inf
                kth = np.partition(row, self.n_neighbors - 1)[self.n_neighbors - 1]
                nb = np.flatnonzero(row <= kth)
                reach = np.maximum(self.k_distance[nb], row[nb])
                lrd_i = 1.0 / max(reach.mean(), DISTANCE_FLOOR)
                out[i] = self.lrd[nb].mean() / lrd_i
        return out


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------

class GmmDetector:
    """Diagonal-covariance Gaussian mixture fitted by EM; score is the NLL.

    Means are seeded k-means++ style, covariances start at the (floored)
    global variance, weights uniform.  EM stops when the mean log-likelihood
    gains less than ``tol`` or after ``max_iter`` iterations.  A collapsed
    fit (vanishing weight or non-finite likelihood) is retried once with a
    fresh seeded initialization; persistent collapse is an error.
    """

    kind = "gmm"

    def __init__(
        self,
        weights: np.ndarray,
        means: np.ndarray,
        variances: np.ndarray,
        ll_history: list[float],
    ):
        self.weights = weights
        self.means = means
        self.variances = variances
        self.ll_history = ll_history

    @classmethod
    def fit(
        cls,
        train: np.ndarray,
        n_components: int = 5,
        seed: int = 0,
        max_iter: int = 200,
        tol: float = 1e-6,
        var_floor: float = 1e-6,
    ) -> "GmmDetector":
        train = _as_matrix(train, name="train points")
        if not (1 <= n_components <= train.shape[0]):
            raise DomainError(
                f"n_components must lie in [1, {train.shape[0]}], got {n_components}"
            )
        root = np.random.SeedSequence([seed])
        for attempt, child in enumerate(root.spawn(2)):
            rng = np.random.default_rng(child)
            fitted = cls._run_em(train, n_components, rng, max_iter, tol, var_floor)
            if fitted is not None:
                return fitted
            warnings.warn(
                "mixture component collapsed; refitting once with a fresh "
                "initialization",
                RuntimeWarning,
                stacklevel=2,
            )
        raise DomainError("mixture fitting collapsed twice; data may be degenerate")

    @staticmethod
    def _kmeanspp_means(
        train: np.ndarray, k: int, rng: np.random.Generator
    ) -> np.ndarray:
        n = train.shape[0]
        means = [train[int(rng.integers(n))]]
        d2 = ((train - means[0]) ** 2).sum(axis=1)
        for _ in range(1, k):
            total = d2.sum()
            if total <= 0.0:
                means.append(train[int(rng.integers(n))])
                continue
            probs = d2 / total
            means.append(train[int(rng.choice(n, p=probs))])
            d2 = np.minimum(d2, ((train - means[-1]) ** 2).sum(axis=1))
        return np.array(means)

    @classmethod
    def _run_em(cls, train, k, rng, max_iter, tol, var_floor):
        n, d = train.shape
        means = cls._kmeanspp_means(train, k, rng)
        variances = np.tile(np.maximum(train.var(axis=0), var_floor), (k, 1))
        weights = np.full(k, 1.0 / k)
        ll_history: list[float] = []
        prev_ll = -np.inf
        for _ in range(max_iter):
            # degenerate data can overflow here; the finiteness check below
            # turns that into a collapse (retried by fit), not a crash
            with np.errstate(invalid="ignore", over="ignore"):
                log_prob = cls._log_component_prob(train, weights, means, variances)
                log_norm = _logsumexp(log_prob, axis=1)
            ll = float(log_norm.mean())
            if not np.isfinite(ll):
                return None
            ll_history.append(ll)
            resp = np.exp(log_prob - log_norm[:, None])
            mass = resp.sum(axis=0)
            if mass.min() < 1e-10:
                return None
            weights = mass / n
            means = (resp.T @ train) / mass[:, None]
            sq = resp.T @ train**2 / mass[:, None] - means**2
            variances = np.maximum(sq, var_floor)
            if ll - prev_ll < tol and np.isfinite(prev_ll):
                break
            prev_ll = ll
        return cls(weights, means, variances, ll_history)

    @staticmethod
    def _log_component_prob(x, weights, means, variances) -> np.ndarray:
        # (N, K): log w_k + log N(x; mu_k, diag sigma_k^2)
        d = x.shape[1]
        log_det = np.log(variances).sum(axis=1)
        diff = x[:, None, :] - means[None, :, :]
        maha = (diff**2 / variances[None, :, :]).sum(axis=2)
        return (
            np.log(weights)[None, :]
            - 0.5 * (d * np.log(2.0 * np.pi) + log_det[None, :] + maha)
        )

    def score_many(self, queries: np.ndarray) -> np.ndarray:
        queries = _as_matrix(queries, dim=self.means.shape[1], name="queries")
        log_prob = self._log_component_prob(
            queries, self.weights, self.means, self.variances
        )
        return -_logsumexp(log_prob, axis=1)

    def score(self, query: np.ndarray) -> float:
        return float(self.score_many(np.asarray(query, dtype=np.float64)[None, :])[0])


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


# ---------------------------------------------------------------------------
# calibration and the fitted-detector bundle
# ---------------------------------------------------------------------------

def calibrate_threshold(train_scores: np.ndarray, quantile: float = 0.99) -> float:
    """Empirical train-score quantile (linear interpolation between order
    statistics, numpy's default rule); predictions flag scores strictly
    above it."""
    train_scores = np.asarray(train_scores, dtype=np.float64)
    if train_scores.ndim != 1 or train_scores.size == 0:
        raise DomainError("threshold calibration needs a non-empty 1-d score array")
    if not (0.0 < quantile < 1.0):
        raise DomainError(f"quantile must lie in (0, 1), got {quantile}")
    return float(np.quantile(train_scores, quantile))


DETECTOR_KINDS = ("abod", "lof", "gmm")


@dataclass
class FittedDetector:
    """A fitted scorer plus its calibrated decision threshold."""

    kind: str
    model: object
    threshold: float
    quantile: float
    train_scores: np.ndarray

    def score_many(self, vectors: np.ndarray) -> np.ndarray:
        return self.model.score_many(vectors)

    def predict(self, scores: np.ndarray) -> np.ndarray:
        return (np.asarray(scores) > self.threshold).astype(np.int64)


def fit_detector(
    kind: str,
    train_vectors: np.ndarray,
    *,
    seed: int = 0,
    quantile: float = 0.99,
    lof_neighbors: int = 15,
    gmm_components: int = 5,
    abod_max_reference: int = 500,
) -> FittedDetector:
    """Fit one detector on train vectors and calibrate its threshold."""
    train_vectors = _as_matrix(train_vectors, name="train vectors")
    if kind == "abod":
        model = AbodDetector.fit(train_vectors, max_reference=abod_max_reference, seed=seed)
        train_scores = model.score_many(train_vectors)
    elif kind == "lof":
        model = LofDetector.fit(train_vectors, n_neighbors=lof_neighbors)
        train_scores = model.train_scores()
    elif kind == "gmm":
        model = GmmDetector.fit(train_vectors, n_components=gmm_components, seed=seed)
        train_scores = model.score_many(train_vectors)
    else:
        raise DomainError(f"unknown detector kind {kind!r}; expected {DETECTOR_KINDS}")
    threshold = calibrate_threshold(train_scores, quantile)
    return FittedDetector(
        kind=kind,
        model=model,
        threshold=threshold,
        quantile=quantile,
        train_scores=train_scores,
    )


# ---------------------------------------------------------------------------
# raw-feature baseline representation
# ---------------------------------------------------------------------------

def baseline_vector(track: ObjectTrack, stats: NormStats, length: int = BASELINE_LENGTH) -> np.ndarray:
    """Standardize, pad (zeros) or truncate to ``length`` rows, and flatten."""
    feats = standardize(to_feature_matrix(track), stats)
    t_len = feats.shape[0]
    if t_len >= length:
        fixed = feats[:length]
    else:
        fixed = np.zeros((length, N_FEATURES))
        fixed[:t_len] = feats
    return fixed.reshape(-1)


def baseline_matrix(
    tracks: Sequence[ObjectTrack], stats: NormStats, length: int = BASELINE_LENGTH
) -> np.ndarray:
    if not tracks:
        raise DomainError("cannot build baseline vectors from zero tracks")
    return np.stack([baseline_vector(t, stats, length) for t in tracks])
