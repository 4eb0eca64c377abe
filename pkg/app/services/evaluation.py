"""
Clustering evaluation: seeded k-means++, Hungarian-matched All/Old/New
accuracy and integer Brent search for the number of clusters.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize_scalar
from scipy.spatial.distance import cdist

from app.core.errors import ArgumentError, EvaluationError
from app.core.numeric import SeededRng
from app.schemas.metrics import GcdMetrics, KEstimate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusteringResult:
    assignments: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)
    inertia: float
    n_iter: int
    inertia_trace: Tuple[float, ...] = field(repr=False, default=())

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return cdist(x, centers, metric="sqeuclidean")


def _assign(x: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, float]:
    d = _sq_distances(x, centers)
    # argmin breaks ties toward the lowest center index
    labels = np.argmin(d, axis=1)
    return labels, float(d[np.arange(x.shape[0]), labels].sum())


def kmeans_plus_plus(x: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(0, n))]
    closest = _sq_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = float(closest.sum())
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(0, n))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def _update_centers(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    k = centers.shape[0]
    new_centers = centers.copy()
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts):
        new_centers[c] = x[labels == c].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        residual = _sq_distances(x, new_centers)[np.arange(x.shape[0]), labels]
        for c in empty:
            far = int(np.argmax(residual))
            logger.debug(f"Re-seeding empty cluster {c} at sample {far}")
            new_centers[c] = x[far]
            residual[far] = 0.0
    return new_centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int) -> ClusteringResult:
    labels, inertia = _assign(x, centers)
    trace = [inertia]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        centers = _update_centers(x, labels, centers)
        new_labels, inertia = _assign(x, centers)
        trace.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusteringResult(labels, centers, inertia, n_iter, tuple(trace))


def kmeans(
    embeddings: np.ndarray,
    k: int,
    rng: SeededRng,
    max_iters: int = 100,
    n_init: int = 1,
) -> ClusteringResult:
    """Best of ``n_init`` k-means++ seeded Lloyd runs by inertia."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if k < 1:
        raise ArgumentError(f"K must be at least 1, got {k}")
    if x.shape[0] < k:
        raise ArgumentError(f"cannot form {k} clusters from {x.shape[0]} samples")
    if max_iters < 1 or n_init < 1:
        raise ArgumentError("max_iters and n_init must be positive")
    if not np.all(np.isfinite(x)):
        raise EvaluationError("embeddings contain non-finite values")
    best: Optional[ClusteringResult] = None
    for attempt in range(n_init):
        run_rng = rng.derive("kmeans-init", attempt)
        result = _lloyd(x, kmeans_plus_plus(x, k, run_rng), max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def contingency_matrix(assignments: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Square cluster-by-class counts, zero padded; also returns the row and column ids."""
    clusters = np.unique(assignments)
    classes = np.unique(labels)
    size = max(clusters.size, classes.size)
    counts = np.zeros((size, size), dtype=np.int64)
    rows = np.searchsorted(clusters, assignments)
    cols = np.searchsorted(classes, labels)
    np.add.at(counts, (rows, cols), 1)
    return counts, clusters, classes


def hungarian_accuracy(
    assignments: Sequence[int],
    hidden_labels: Sequence[int],
    old_class_set: Sequence[int],
    k_used: Optional[int] = None,
) -> GcdMetrics:
    """
    All/Old/New accuracy under the single cluster-to-class matching that
    maximizes correct assignments on the full set.
    """
    assignments = np.asarray(assignments, dtype=np.int64).reshape(-1)
    labels = np.asarray(hidden_labels, dtype=np.int64).reshape(-1)
    if assignments.size == 0:
        raise ArgumentError("cannot score an empty assignment")
    if assignments.size != labels.size:
        raise ArgumentError(f"{assignments.size} assignments for {labels.size} labels")

    counts, clusters, classes = contingency_matrix(assignments, labels)
    row_ind, col_ind = linear_sum_assignment(counts, maximize=True)
    mapping: Dict[int, int] = {
        int(clusters[r]): int(classes[c])
        for r, c in zip(row_ind, col_ind)
        if r < clusters.size and c < classes.size
    }
    predicted = np.array([mapping.get(int(a), -1) for a in assignments])
    correct = predicted == labels
    old_mask = np.isin(labels, list(old_class_set))
    n_old, n_new = int(old_mask.sum()), int((~old_mask).sum())
    correct_old = int(correct[old_mask].sum())
    correct_new = int(correct[~old_mask].sum())
    return GcdMetrics(
        all=(correct_old + correct_new) / labels.size,
        old=correct_old / n_old if n_old else 0.0,
        new=correct_new / n_new if n_new else 0.0,
        matched_permutation=mapping,
        n_old=n_old,
        n_new=n_new,
        correct_old=correct_old,
        correct_new=correct_new,
        k_used=k_used,
    )


def cluster_and_score(
    embeddings: np.ndarray,
    hidden_labels: np.ndarray,
    old_class_set: Sequence[int],
    k: int,
    rng: SeededRng,
    max_iters: int = 100,
    n_init: int = 1,
) -> GcdMetrics:
    clustering = kmeans(embeddings, k, rng, max_iters, n_init)
    return hungarian_accuracy(clustering.assignments, hidden_labels, old_class_set, k_used=k)


def estimate_k(
    embeddings: np.ndarray,
    labeled_embeddings: np.ndarray,
    labeled_labels: Sequence[int],
    k_min: int,
    k_max: int,
    rng: SeededRng,
    max_iters: int = 100,
    n_init: int = 1,
) -> KEstimate:
    """
    Pick K by the accuracy of the labeled subset under a K-cluster k-means of
    all samples. Brent's bounded search runs on the rounded objective, then
    k* - 1, k* and k* + 1 are compared directly; ties go to the smaller K.
    """
    if k_min < 1 or k_max <= k_min:
        raise ArgumentError(f"invalid K bounds [{k_min}, {k_max}]")
    unlabeled = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labeled = np.atleast_2d(np.asarray(labeled_embeddings, dtype=np.float64))
    labels = np.asarray(labeled_labels, dtype=np.int64).reshape(-1)
    if labeled.shape[0] != labels.size or labels.size == 0:
        raise ArgumentError("labeled subset needs one label per embedding and at least one sample")
    full = np.vstack([unlabeled, labeled])
    if k_max > full.shape[0]:
        raise ArgumentError(f"k_max {k_max} exceeds the {full.shape[0]} available samples")
    labeled_rows = slice(unlabeled.shape[0], full.shape[0])
    known = np.unique(labels)

    scores: Dict[int, float] = {}
    trace: List[Tuple[int, float]] = []

    def score(k: int) -> float:
        if k not in scores:
            clustering = kmeans(full, k, rng.derive("estimate-k", k), max_iters, n_init)
            metrics = hungarian_accuracy(clustering.assignments[labeled_rows], labels, known)
            scores[k] = metrics.all
            trace.append((k, metrics.all))
        return scores[k]

    result = minimize_scalar(
        lambda k: -score(int(np.clip(np.rint(k), k_min, k_max))),
        bounds=(k_min, k_max),
        method="bounded",
    )
    center = int(np.clip(np.rint(result.x), k_min, k_max))
    candidates = [k for k in (center - 1, center, center + 1) if k_min <= k <= k_max]
    k_hat = max(candidates, key=lambda k: (score(k), -k))
    logger.info(f"Estimated K={k_hat} in [{k_min}, {k_max}] after {len(trace)} evaluations")
    return KEstimate(k_hat=k_hat, search_bounds=(k_min, k_max), objective_trace=trace)
