"""Joint spatial + SH-coefficient k-means with restart-aggregated seeding.

Each masked voxel becomes a 31-vector: its world position in mm followed by
its SH coefficients scaled by a balance factor (default 100), so one
Euclidean metric carries both spatial and spectral proximity.  Seeding runs
many randomly initialized k-means passes, pools all resulting centroids,
and clusters that cloud once to get stable starting centroids.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from .fod import ShField
from .volume import LabelVolume, Volume

DEFAULT_ALPHA = 100.0


def worker_count() -> int:
    """Worker processes/threads requested via PARCELBENCH_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("PARCELBENCH_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 7
    n_restarts: int = 5000
    max_iter: int = 300
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass(frozen=True)
class FeatureSet:
    """Per-voxel feature vectors [position_mm; alpha * coefficients].

    alpha = 0 is the degenerate pure-spatial limit (useful in tests);
    normal operation keeps it positive.
    """

    positions: np.ndarray  # (n, 3) world mm
    scaled_coeffs: np.ndarray  # (n, n_coeffs), already multiplied by alpha
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if len(self.positions) != len(self.scaled_coeffs):
            raise ValueError("positions and coefficients must align")

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.positions, self.scaled_coeffs])

    def __len__(self) -> int:
        return len(self.positions)


def build_features(field: ShField, alpha: float = DEFAULT_ALPHA) -> FeatureSet:
    """Feature vectors for every masked voxel of an SH field."""
    if field.n_voxels == 0:
        raise ValueError("field is empty")
    return FeatureSet(
        positions=field.positions_mm(),
        scaled_coeffs=alpha * field.coeffs,
        alpha=alpha,
    )


def _distances_sq(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        (x * x).sum(axis=1)[:, None]
        + (centroids * centroids).sum(axis=1)[None, :]
        - 2.0 * x @ centroids.T
    )
    return np.maximum(d2, 0.0)


def kmeans_once(x, k: int, init_centroids, max_iter: int = 300, tol: float = 1e-6):
    """One Lloyd k-means run from given initial centroids.

    Empty clusters are reseeded from the point currently farthest from its
    centroid.  Convergence: relative centroid movement below tol.  Returns
    (assignment, centroids, inertia); the assignment is a fixed point of the
    returned centroids.
    """
    x = x.matrix if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)
    n = len(x)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    centroids = np.array(init_centroids, dtype=np.float64, copy=True)
    if centroids.shape != (k, x.shape[1]):
        raise ValueError(f"init centroids must be ({k}, {x.shape[1]})")

    prev_inertia = np.inf
    for _ in range(max_iter):
        d2 = _distances_sq(x, centroids)
        assign = d2.argmin(axis=1)
        dist_own = d2[np.arange(n), assign]

        for j in range(k):
            if not (assign == j).any():
                far = int(dist_own.argmax())
                centroids[j] = x[far]
                assign[far] = j
                dist_own[far] = 0.0

        inertia = float(dist_own.sum())
        assert inertia <= prev_inertia * (1.0 + 1e-9) + 1e-12, "inertia increased"
        prev_inertia = inertia

        new_centroids = centroids.copy()
        for j in range(k):
            sel = assign == j
            if sel.any():
                new_centroids[j] = x[sel].mean(axis=0)
        movement = np.linalg.norm(new_centroids - centroids) / max(np.linalg.norm(centroids), 1e-12)
        centroids = new_centroids
        if movement < tol:
            break

    d2 = _distances_sq(x, centroids)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assign].sum())
    return assign, centroids, inertia


def _restart(x: np.ndarray, k: int, seed_seq: np.random.SeedSequence, max_iter: int, tol: float):
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    init = x[rng.choice(len(x), size=k, replace=False)]
    return kmeans_once(x, k, init, max_iter, tol)


def seed_by_restarts(features, cfg: KMeansConfig) -> np.ndarray:
    """Aggregate many k-means restarts into k starting centroids.

    Runs cfg.n_restarts independent k-means passes from uniform-random
    distinct-voxel starts, pools all resulting centroids, then clusters the
    pooled cloud with one standard k-means (best of 10 random inits).
    PRNG streams derive from cfg.seed, so the result is reproducible and
    independent of worker scheduling.
    """
    x = features.matrix if isinstance(features, FeatureSet) else np.asarray(features, dtype=np.float64)
    if cfg.k > len(x):
        raise ValueError(f"k={cfg.k} exceeds the number of points {len(x)}")

    restart_seqs = [np.random.SeedSequence(cfg.seed, spawn_key=(0, r)) for r in range(cfg.n_restarts)]
    jobs = worker_count()
    if jobs > 1 and cfg.n_restarts > 1:
        results = Parallel(n_jobs=jobs, prefer="threads")(
            delayed(_restart)(x, cfg.k, s, cfg.max_iter, cfg.tol) for s in restart_seqs
        )
    else:
        results = [_restart(x, cfg.k, s, cfg.max_iter, cfg.tol) for s in restart_seqs]
    pool = np.vstack([c for _, c, _ in results])

    best = None
    for i in range(10):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(1, i))))
        init = pool[rng.choice(len(pool), size=cfg.k, replace=False)]
        _, centroids, inertia = kmeans_once(pool, cfg.k, init, cfg.max_iter, cfg.tol)
        if best is None or inertia < best[0]:
            best = (inertia, centroids)
    return best[1]


def segment_dti(field: ShField, cfg: KMeansConfig | None = None, alpha: float = DEFAULT_ALPHA,
                centroids_out=None) -> LabelVolume:
    """Cluster an SH field into k spatially coherent parcels.

    Labels are 1..k ordered by descending cluster size (ties by lower
    centroid x); background stays 0.  ``centroids_out`` optionally names a
    CSV to dump the final centroids to for inspection.
    """
    cfg = cfg or KMeansConfig()
    features = build_features(field, alpha)
    seeds = seed_by_restarts(features, cfg)
    assign, centroids, _ = kmeans_once(features, cfg.k, seeds, cfg.max_iter, cfg.tol)
    if centroids_out is not None:
        header = "x_mm,y_mm,z_mm," + ",".join(f"q{j}" for j in range(field.basis.n_coeffs))
        np.savetxt(centroids_out, centroids, delimiter=",", header=header, comments="")

    sizes = np.bincount(assign, minlength=cfg.k)
    order = sorted(range(cfg.k), key=lambda j: (-sizes[j], centroids[j, 0]))
    relabel = np.empty(cfg.k, dtype=np.int64)
    for new_id, j in enumerate(order, start=1):
        relabel[j] = new_id

    out = np.zeros(field.mask.grid.dims[:3], dtype=np.uint8)
    idx = field.mask.indices()
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = relabel[assign]
    grid = Volume(out, field.mask.grid.spacing, field.mask.grid.affine)
    return LabelVolume(grid=grid, labels={i: f"cluster_{i}" for i in range(1, cfg.k + 1)})


class SpatialSpectralKMeans(BaseEstimator):
    """sklearn-style front end: fit(X) on feature rows, predict by nearest centroid."""

    def __init__(self, n_clusters=7, n_restarts=5000, max_iter=300, tol=1e-6, random_state=0):
        self.n_clusters = n_clusters
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _config(self) -> KMeansConfig:
        return KMeansConfig(
            k=self.n_clusters,
            n_restarts=self.n_restarts,
            max_iter=self.max_iter,
            tol=self.tol,
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        x = X.matrix if isinstance(X, FeatureSet) else np.asarray(X, dtype=np.float64)
        cfg = self._config()
        seeds = seed_by_restarts(x, cfg)
        assign, centroids, inertia = kmeans_once(x, cfg.k, seeds, cfg.max_iter, cfg.tol)
        self.cluster_centers_ = centroids
        self.labels_ = assign
        self.inertia_ = inertia
        return self

    def predict(self, X):
        x = X.matrix if isinstance(X, FeatureSet) else np.asarray(X, dtype=np.float64)
        return _distances_sq(x, self.cluster_centers_).argmin(axis=1)

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_
