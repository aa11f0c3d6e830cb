"""Cross-entropy, mutual cross-entropy and graph consistency losses."""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from gcmt.core.errors import DimensionError, LabelIndexError
from gcmt.core.graphs import DenseRowStochastic, SparseRowGraph, student_graph_backward
from gcmt.typing import Matrix
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossReport:
    """Loss components of one batch."""

    l_ce: float
    l_mce: float
    l_gcc: float
    l_total: float
    lambda_gcc: float

    @property
    def l_lp(self) -> float:
        """Label-prediction part, CE + MCE."""
        return self.l_ce + self.l_mce

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite([self.l_ce, self.l_mce, self.l_gcc, self.l_total])))


def _clamped_log(p: Matrix) -> Matrix:
    return np.log(np.maximum(p, LOG_EPS))


def ce_loss(probabilities: Matrix, pseudo_labels: Sequence[int]) -> Tuple[float, Matrix]:
    """Mean negative log-likelihood of the labels and its gradient w.r.t. logits."""
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    size, classes = probabilities.shape
    if labels.shape != (size,):
        raise DimensionError(f"{labels.shape[0]} labels for {size} rows")
    if size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelIndexError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    if size == 0:
        return 0.0, np.zeros_like(probabilities)

    rows = np.arange(size)
    loss = -float(np.mean(_clamped_log(probabilities[rows, labels])))

    grad = probabilities.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / size


def mce_loss(student_probs: Sequence[Matrix], teacher_probs: Sequence[Matrix]) -> Tuple[float, List[Matrix]]:
    """Cross-entropy of every student against the mean teacher prediction.

    Teacher probabilities are targets only and receive no gradient.
    """
    if len(student_probs) != len(teacher_probs) or not student_probs:
        raise DimensionError(f"{len(student_probs)} students vs {len(teacher_probs)} teachers")

    shape = student_probs[0].shape
    if any(p.shape != shape for p in list(student_probs) + list(teacher_probs)):
        raise DimensionError("all probability matrices must share one shape")

    size = shape[0]
    if size == 0:
        return 0.0, [np.zeros(shape) for _ in student_probs]

    target = np.mean(np.stack(teacher_probs), axis=0)
    loss = -float(np.sum(target * sum(_clamped_log(p) for p in student_probs))) / size
    grads = [(p - target) / size for p in student_probs]
    return loss, grads


def graph_cross_entropy(weights: Matrix, fused: SparseRowGraph, knn_k: int) -> Tuple[float, Matrix]:
    """One student's term -1/(B K) sum W_hat log w and its gradient w.r.t. `weights`.

    On the fused support the gradient is -W_hat / (B K w); it is zero where the
    log clamp is active and off the support.
    """
    size = weights.shape[0]
    if weights.shape != (size, size) or fused.size != size:
        raise DimensionError(f"student graph {weights.shape} vs fused graph of size {fused.size}")

    rows = fused.row_ids()
    cols = fused.indices
    target = fused.weights
    edge_weights = weights[rows, cols]
    scale = 1.0 / (size * knn_k)

    loss = -scale * float(np.sum(target * _clamped_log(edge_weights)))

    grad = np.zeros_like(weights)
    active = edge_weights > LOG_EPS
    grad[rows[active], cols[active]] = -scale * target[active] / edge_weights[active]
    return loss, grad


def gcc_loss(
    student_graphs: Sequence[DenseRowStochastic],
    fused: SparseRowGraph,
    knn_k: int,
) -> Tuple[float, List[Matrix]]:
    """Graph consistency loss summed over students, with gradients w.r.t. each student's features."""
    if not student_graphs:
        raise DimensionError("at least one student graph is required")

    total = 0.0
    feature_grads: List[Matrix] = []
    for graph in student_graphs:
        loss, grad_weights = graph_cross_entropy(graph.weights, fused, knn_k)
        total += loss
        feature_grads.append(student_graph_backward(graph, grad_weights))

    return total, feature_grads


def total_loss(l_ce: float, l_mce: float, l_gcc: float, lambda_gcc: float) -> LossReport:
    """L = L_CE + L_MCE + lambda_gcc * L_GCC."""
    return LossReport(l_ce, l_mce, l_gcc, l_ce + l_mce + lambda_gcc * l_gcc, lambda_gcc)
