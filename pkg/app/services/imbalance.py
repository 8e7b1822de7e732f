# app/services/imbalance.py
"""
Unsupervised imbalance handling on top of the current representations.

  kmeans        k-means++ seeding + Lloyd iterations (fixpoint or 100 iters)
  reweight      RE: weight N / f_j per sample, rescaled so the batch min is 1
  select_batch  SE: m/2 nearest points to each of the two farthest centroids
  plan_batches  the training schedule: plain warm-up epoch(s), then RE/SE
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist

from app.errors import ConstraintError, DataError, NumericError, ShapeError
from app.schemas import ClusterDiagnostics, ImbalanceConfig
from app.services import seeding
from app.services.encoder import EncoderState, encode_in_chunks
from app.services.tensor_core import Array

logger = logging.getLogger(__name__)

MAX_LLOYD_ITERS = 100
Seed = Union[int, np.random.Generator]


@dataclass
class ClusterModel:
    centroids: Array
    assignments: Array
    frequencies: Array
    inertia: float
    iterations: int = 0
    inertia_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @classmethod
    def from_centroids(cls, centroids: Array, points: Array) -> "ClusterModel":
        """Assign points to fixed centroids (no Lloyd updates, no repair)."""
        centroids = np.asarray(centroids, dtype=np.float64)
        points = np.asarray(points, dtype=np.float64)
        d2 = _sq_distances(points, centroids)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(points)), labels].sum())
        return cls(centroids, labels, np.bincount(labels, minlength=len(centroids)), inertia)

    def assign(self, points: Array) -> "ClusterModel":
        return ClusterModel.from_centroids(self.centroids, points)


@dataclass
class BatchPlan:
    mode: str
    indices: Array
    weights: Array
    chosen_pair: Optional[Tuple[int, int]] = None
    distance: Optional[float] = None


@dataclass
class PlannedBatch:
    iteration: int
    epoch: int
    indices: Array
    weights: Array
    mode: str
    diagnostics: Optional[ClusterDiagnostics] = None


# -------------------------------
# k-means
# -------------------------------
def _sq_distances(points: Array, centroids: Array) -> Array:
    return cdist(points, centroids, "sqeuclidean")


def _as_rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return seeding.rng(int(seed), "kmeans")


def kmeans_plusplus(points: Array, k: int, rng: np.random.Generator) -> Array:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    closest = _sq_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point already sits on a centroid (duplicates)
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[i] = points[idx]
        closest = np.minimum(closest, _sq_distances(points, centroids[i:i + 1])[:, 0])
    return centroids


def _repair_empty(points: Array, labels: Array, d2: Array, k: int) -> Array:
    """Move the point farthest from its own centroid into each empty cluster."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        own = d2[np.arange(len(labels)), labels]
        donors = counts[labels] >= 2
        if not np.any(donors):
            break
        candidates = np.where(donors, own, -np.inf)
        idx = int(np.argmax(candidates))
        logger.warning("[kmeans] empty cluster %d reseeded at point %d", j, idx)
        counts[labels[idx]] -= 1
        labels[idx] = j
        counts[j] = 1
    return labels


def _centroids_of(points: Array, labels: Array, k: int) -> Array:
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=k)
    return sums / counts[:, None]


def kmeans(points: Array, k: int, seed: Seed = 0, max_iter: int = MAX_LLOYD_ITERS) -> ClusterModel:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"kmeans expects an N x d matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ConstraintError(f"k={k} must be >= 1")
    if n < k:
        raise ConstraintError(f"kmeans needs N >= k, got N={n} k={k}")
    if not np.all(np.isfinite(points)):
        raise NumericError("kmeans input contains non-finite values")

    centroids = kmeans_plusplus(points, k, _as_rng(seed))
    labels: Optional[Array] = None
    history: List[float] = []
    iters = 0
    for iters in range(1, max_iter + 1):
        d2 = _sq_distances(points, centroids)
        new_labels = _repair_empty(points, np.argmin(d2, axis=1), d2, k)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = _centroids_of(points, labels, k)
        inertia = float(np.sum((points - centroids[labels]) ** 2))
        if history and inertia > history[-1] * (1 + 1e-9) + 1e-12:
            raise NumericError(f"kmeans inertia increased {history[-1]:.6g} -> {inertia:.6g}")
        history.append(inertia)

    freqs = np.bincount(labels, minlength=k)
    return ClusterModel(centroids, labels, freqs, history[-1], iters, history)


def kmeans_restarts(points: Array, k: int, seed: int = 0, restarts: int = 5) -> ClusterModel:
    """Best of `restarts` seeded runs by inertia; first run wins ties."""
    best: Optional[ClusterModel] = None
    for r in range(max(1, restarts)):
        model = kmeans(points, k, seeding.rng(seed, "kmeans", r))
        if best is None or model.inertia < best.inertia:
            best = model
    return best


# -------------------------------
# RE / SE
# -------------------------------
def reweight(model: ClusterModel) -> Array:
    n = len(model.assignments)
    freqs = model.frequencies.astype(np.float64)
    raw = n / freqs[model.assignments]
    return raw / raw.min()


def farthest_pair(centroids: Array) -> Tuple[int, int, float]:
    """Centroid pair with maximal distance; the lowest (i, j) wins ties."""
    # pdist order is (0,1), (0,2), ..., (1,2), ...; argmax keeps the first maximum
    d = pdist(centroids)
    best = int(np.argmax(d))
    rows, cols = np.triu_indices(len(centroids), k=1)
    return int(rows[best]), int(cols[best]), float(d[best])


def check_selection(m: int, n: int, k: int) -> None:
    if k < 2:
        raise ConstraintError("SE requires >= 2 clusters")
    if m < 2 or m % 2:
        raise ConstraintError(f"SE batch size m={m} must be even and >= 2")
    if m >= n / k:
        raise ConstraintError(f"m={m} must be smaller than N/k={n / k:g}")


def select_batch(points: Array, model: ClusterModel, m: int,
                 enforce_constraint: bool = True) -> BatchPlan:
    points = np.asarray(points, dtype=np.float64)
    n, k = len(points), model.k
    if enforce_constraint:
        check_selection(m, n, k)
    else:
        if k < 2:
            raise ConstraintError("SE requires >= 2 clusters")
        if m % 2 or m > n:
            raise ConstraintError(f"cannot select m={m} from {n} points")
    i, j, dist = farthest_pair(model.centroids)
    half = m // 2
    taken = np.zeros(n, dtype=bool)
    picks = []
    for c in (i, j):
        d = np.linalg.norm(points - model.centroids[c], axis=1)
        order = [idx for idx in np.argsort(d, kind="stable") if not taken[idx]][:half]
        taken[order] = True
        picks.extend(order)
    return BatchPlan("se", np.asarray(picks, dtype=np.int64), np.ones(m), (i, j), dist)


# -------------------------------
# schedule
# -------------------------------
def steps_per_epoch(n: int, batch_size: int) -> int:
    if n < batch_size:
        raise DataError(f"dataset of {n} samples is smaller than batch size {batch_size}")
    return n // batch_size


def _plain(seed: int, epoch: int, within: int, n: int, batch_size: int, perm_cache: dict) -> Array:
    if epoch not in perm_cache:
        perm_cache.clear()
        perm_cache[epoch] = seeding.rng(seed, "plan", 0, epoch).permutation(n)
    return perm_cache[epoch][within * batch_size:(within + 1) * batch_size]


def plan_batches(volumes: Array, state: EncoderState, config: ImbalanceConfig, batch_size: int,
                 seed: int, total_iterations: int,
                 diagnostics_path: Optional[Path] = None) -> Iterator[PlannedBatch]:
    """Yields one PlannedBatch per training iteration.

    `state` is read at every RE/SE iteration, so updates made by the trainer
    between yields are picked up by the next clustering."""
    n = len(volumes)
    per_epoch = steps_per_epoch(n, batch_size)
    pool_size = config.pool_size
    if config.mode == "none":
        warmup = total_iterations
    else:
        warmup = min(total_iterations, config.warmup_epochs * per_epoch)
        if total_iterations > warmup and n < pool_size:
            raise DataError(f"dataset of {n} samples is smaller than the candidate pool N={pool_size}")
        if config.mode == "se":
            check_selection(config.m, pool_size, config.k)

    perms: dict = {}
    model: Optional[ClusterModel] = None
    diag_fh = open(diagnostics_path, "a", encoding="utf-8") if diagnostics_path else None
    try:
        for it in range(total_iterations):
            epoch = it // per_epoch
            if it < warmup:
                idx = _plain(seed, epoch, it % per_epoch, n, batch_size, perms)
                yield PlannedBatch(it, epoch, idx, np.ones(len(idx)), "none" if config.mode == "none" else "warmup")
                continue

            pool_rng = seeding.rng(seed, "plan", 1, it)
            pool = np.sort(pool_rng.choice(n, size=pool_size, replace=False))
            reps = encode_in_chunks(state, volumes[pool])
            if model is None or (it - warmup) % config.kmeans_period == 0:
                model = kmeans(reps, config.k, seeding.rng(seed, "kmeans", it))
            else:
                model = model.assign(reps)

            if config.mode == "re":
                plan = BatchPlan("re", np.arange(pool_size), reweight(model))
                if config.re_subsample and batch_size < pool_size:
                    sub = np.sort(pool_rng.choice(pool_size, size=batch_size, replace=False))
                    w = plan.weights[sub]
                    plan = replace(plan, indices=sub, weights=w / w.min())
            else:
                plan = select_batch(reps, model, config.m)

            diag = ClusterDiagnostics(iteration=it, inertia=model.inertia,
                                      frequencies=[int(f) for f in model.frequencies],
                                      chosen_pair=plan.chosen_pair, distance=plan.distance)
            if diag_fh:
                diag_fh.write(diag.model_dump_json() + "\n")
            logger.debug("[plan] it=%d mode=%s freqs=%s", it, config.mode, diag.frequencies)
            yield PlannedBatch(it, epoch, pool[plan.indices], plan.weights, config.mode, diag)
    finally:
        if diag_fh:
            diag_fh.close()
