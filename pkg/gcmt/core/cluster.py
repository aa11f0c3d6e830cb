"""Offline k-means pseudo-labelling over averaged teacher features."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from gcmt.core.errors import ClusterSizeError, ConsistencyError, DimensionError, ParameterError, ValidationError
from gcmt.core.model import NetworkPair, forward_features, reinit_head
from gcmt.core.numcore import NORM_EPS, as_matrix, l2_normalize_rows
from gcmt.typing import IndexArray, Matrix
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

# Lloyd inertia may wobble by rounding only.
INERTIA_SLACK = 1e-9
DISTANCE_CHUNK = 1024

SeedLike = Optional[Union[int, Sequence[int]]]


@dataclass(frozen=True)
class PseudoLabeling:
    """Cluster assignment of every training sample for one epoch."""

    assignments: IndexArray
    cluster_means: Matrix
    inertia: float
    epoch: int = 0
    iterations: int = 0

    @property
    def cluster_count(self) -> int:
        return int(self.cluster_means.shape[0])

    def members(self) -> List[IndexArray]:
        """Sample indices of every cluster, in cluster order."""
        order = np.argsort(self.assignments, kind="stable")
        counts = np.bincount(self.assignments, minlength=self.cluster_count)
        return np.split(order, np.cumsum(counts)[:-1])


def average_teacher_features(per_teacher_features: Sequence[Matrix]) -> Matrix:
    """Mean over teachers, re-normalised to unit rows."""
    if not per_teacher_features:
        raise ParameterError("at least one teacher feature matrix is required")

    shape = per_teacher_features[0].shape
    if any(f.shape != shape for f in per_teacher_features):
        raise DimensionError(f"teacher feature shapes differ: {[f.shape for f in per_teacher_features]}")

    return l2_normalize_rows(np.mean(np.stack(per_teacher_features), axis=0))


def _squared_distances(points: Matrix, centers: Matrix) -> Matrix:
    # direct differences keep exact zeros for coincident points
    distances = np.empty((points.shape[0], centers.shape[0]))
    for start in range(0, points.shape[0], DISTANCE_CHUNK):
        diff = points[start : start + DISTANCE_CHUNK, None, :] - centers[None, :, :]
        distances[start : start + DISTANCE_CHUNK] = np.einsum("ncd,ncd->nc", diff, diff)
    return distances


def _kmeans_plus_plus(points: Matrix, count: int, rng: np.random.Generator) -> Matrix:
    """Greedy k-means++: of `2 + log(count)` D^2-sampled candidates keep the one lowering the potential most."""
    size = points.shape[0]
    trials = 2 + int(np.log(count))
    chosen = [int(rng.integers(size))]
    closest = _squared_distances(points, points[chosen])[:, 0]
    for _ in range(1, count):
        potential = float(closest.sum())
        if potential > 0:
            draws = rng.random(trials) * potential
            candidates = np.searchsorted(np.cumsum(closest), draws, side="right")
            candidates = np.clip(candidates, 0, size - 1)
        else:
            # every point sits on a center already
            candidates = np.asarray([rng.choice(np.setdiff1d(np.arange(size), chosen))])

        to_candidates = np.minimum(closest[:, None], _squared_distances(points, points[candidates]))
        best = int(np.argmin(to_candidates.sum(axis=0)))
        chosen.append(int(candidates[best]))
        closest = to_candidates[:, best]

    return points[chosen].copy()


def _update_centers(points: Matrix, labels: IndexArray, distances: Matrix, count: int) -> Matrix:
    """Cluster means; empty clusters move onto the points farthest from their centers."""
    centers = np.zeros((count, points.shape[1]))
    sizes = np.bincount(labels, minlength=count)
    np.add.at(centers, labels, points)
    filled = sizes > 0
    centers[filled] /= sizes[filled, None]

    empty = np.flatnonzero(~filled).tolist()
    if empty:
        own = distances[np.arange(points.shape[0]), labels]
        # farthest first, lower index on ties
        donors = np.lexsort((np.arange(points.shape[0]), -own))
        for cluster, donor in zip(empty, donors):
            centers[cluster] = points[donor]
        logger.warning(f"k-means: reseeded {len(empty)} empty clusters")

    return centers


def _fill_empty(points: Matrix, labels: IndexArray, centers: Matrix) -> IndexArray:
    """Hand each still-empty cluster the farthest point of a cluster with spare members."""
    labels = labels.copy()
    count = centers.shape[0]
    for cluster in range(count):
        sizes = np.bincount(labels, minlength=count)
        if sizes[cluster]:
            continue
        own = _squared_distances(points, centers)[np.arange(points.shape[0]), labels]
        own[sizes[labels] < 2] = -np.inf
        donor = int(np.lexsort((np.arange(points.shape[0]), -own))[0])
        labels[donor] = cluster
        centers[cluster] = points[donor]

    return labels


def _unit_means(points: Matrix, labels: IndexArray, centers: Matrix) -> Matrix:
    """Normalised centers; a center that cancels to zero takes its longest member instead."""
    centers = centers.copy()
    norms = np.linalg.norm(points, axis=1)
    degenerate = np.flatnonzero(np.linalg.norm(centers, axis=1) < NORM_EPS).tolist()
    for cluster in degenerate:
        members = np.flatnonzero(labels == cluster)
        # longest member, lower index on ties
        donor = int(members[np.argmax(norms[members])])
        if norms[donor] >= NORM_EPS:
            centers[cluster] = points[donor]
        else:
            centers[cluster] = np.eye(1, points.shape[1], 0)[0]
    if degenerate:
        logger.warning(f"k-means: {len(degenerate)} cluster means cancel to zero, replaced by a member feature")

    return l2_normalize_rows(centers)


def kmeans(features: Matrix, cluster_count: int, max_iters: int = 100, seed: SeedLike = 0) -> PseudoLabeling:
    """k-means++ seeding followed by Lloyd iterations until the assignment is a fixpoint."""
    points = as_matrix("features", features)
    size = points.shape[0]
    if cluster_count < 1:
        raise ParameterError(f"cluster count must be >= 1, got {cluster_count}")
    if size < cluster_count:
        raise ClusterSizeError(f"cannot form {cluster_count} clusters from {size} points")
    if max_iters < 1:
        raise ParameterError(f"max_iters must be >= 1, got {max_iters}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(points, cluster_count, rng)

    labels: Optional[IndexArray] = None
    previous_inertia = np.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        distances = _squared_distances(points, centers)
        new_labels = np.argmin(distances, axis=1).astype(np.int64)
        inertia = float(distances[np.arange(size), new_labels].sum())
        logger.debug(f"k-means iteration {iterations}: inertia {inertia:.6f}")

        if inertia > previous_inertia + INERTIA_SLACK * max(1.0, previous_inertia):
            raise ConsistencyError(f"k-means inertia increased from {previous_inertia} to {inertia}")
        previous_inertia = inertia

        if labels is not None and np.array_equal(new_labels, labels):
            break

        labels = new_labels
        centers = _update_centers(points, labels, distances, cluster_count)

    if labels is None:
        raise ConsistencyError("k-means produced no assignment")
    labels = _fill_empty(points, labels, centers)
    final_inertia = float(_squared_distances(points, centers)[np.arange(size), labels].sum())

    means = _unit_means(points, labels, centers)
    return PseudoLabeling(labels, means, final_inertia, iterations=iterations)


def extract_teacher_features(pairs: Sequence[NetworkPair], vectors: Matrix) -> List[Matrix]:
    """Teacher features of every sample, no augmentation."""
    return [forward_features(pair.teacher.encoder, vectors)[0] for pair in pairs]


def relabel_epoch(
    pairs: Sequence[NetworkPair],
    vectors: Matrix,
    cluster_count: int,
    seed: SeedLike = 0,
    epoch: int = 0,
    max_iters: int = 100,
) -> Tuple[PseudoLabeling, List[NetworkPair]]:
    """Cluster averaged teacher features and re-initialise every pair's heads with the means."""
    if vectors.shape[0] == 0:
        raise ValidationError("cannot relabel an empty dataset")

    averaged = average_teacher_features(extract_teacher_features(pairs, vectors))
    labeling = kmeans(averaged, cluster_count, max_iters=max_iters, seed=seed)
    labeling = PseudoLabeling(
        labeling.assignments, labeling.cluster_means, labeling.inertia, epoch, labeling.iterations
    )
    logger.info(
        f"epoch {epoch}: {labeling.cluster_count} clusters, inertia {labeling.inertia:.4f}, "
        f"{labeling.iterations} Lloyd iterations"
    )

    return labeling, [reinit_head(pair, labeling.cluster_means) for pair in pairs]
