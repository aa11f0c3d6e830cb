"""Per-batch teacher K-NN graphs, their fusion, and dense student graphs."""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Set, Tuple, Union

import networkx
import numpy as np

from gcmt.core.errors import ConsistencyError, DimensionError, GraphSizeError, ParameterError
from gcmt.core.numcore import as_matrix, row_softmax, row_softmax_backward
from gcmt.typing import IndexArray, Matrix
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()


@dataclass(frozen=True)
class SparseRowGraph:
    """Directed graph stored row-wise (CSR); neighbours of each row sorted by index."""

    size: int
    indptr: IndexArray
    indices: IndexArray
    weights: Matrix

    def __post_init__(self) -> None:
        if self.indptr.shape != (self.size + 1,) or self.indices.shape != self.weights.shape:
            raise DimensionError("inconsistent sparse graph arrays")
        for i in range(self.size):
            if np.any(self.indices[self.indptr[i] : self.indptr[i + 1]] == i):
                raise ConsistencyError(f"self-edge on row {i}")

    @classmethod
    def from_rows(cls, size: int, rows: Sequence[Sequence[Tuple[int, float]]]) -> "SparseRowGraph":
        """Build from per-row `(neighbour, weight)` lists."""
        if len(rows) != size:
            raise DimensionError(f"expected {size} rows, got {len(rows)}")

        indptr = [0]
        indices: List[int] = []
        weights: List[float] = []
        for row in rows:
            for k, w in sorted(row):
                indices.append(int(k))
                weights.append(float(w))
            indptr.append(len(indices))

        return cls(
            size,
            np.asarray(indptr, dtype=np.int64),
            np.asarray(indices, dtype=np.int64),
            np.asarray(weights, dtype=np.float64),
        )

    def row(self, i: int) -> Tuple[IndexArray, Matrix]:
        """Neighbour indices and weights of row `i`."""
        start, stop = self.indptr[i], self.indptr[i + 1]
        return self.indices[start:stop], self.weights[start:stop]

    def with_weights(self, weights: Matrix) -> "SparseRowGraph":
        """Same support, new weights."""
        return SparseRowGraph(self.size, self.indptr, self.indices, np.asarray(weights, dtype=np.float64))

    def row_ids(self) -> IndexArray:
        """Row index of every stored edge."""
        return np.repeat(np.arange(self.size, dtype=np.int64), np.diff(self.indptr))

    def support(self) -> Set[Tuple[int, int]]:
        """Set of `(i, k)` edges."""
        return set(zip(self.row_ids().tolist(), self.indices.tolist()))

    def to_dense(self) -> Matrix:
        """B x B matrix with zeros off the support."""
        dense = np.zeros((self.size, self.size))
        dense[self.row_ids(), self.indices] = self.weights
        return dense

    def to_networkx(self) -> networkx.DiGraph:
        """networkx view with a `weight` attribute on every edge."""
        graph = networkx.DiGraph()
        graph.add_nodes_from(range(self.size))
        graph.add_weighted_edges_from(
            zip(self.row_ids().tolist(), self.indices.tolist(), self.weights.tolist()), weight="weight"
        )
        return graph


@dataclass(frozen=True)
class DenseRowStochastic:
    """Student graph: row-stochastic B x B weights with zero diagonal."""

    weights: Matrix
    features: Matrix
    beta: float

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])


def build_teacher_graph(features: Matrix, knn_k: int) -> SparseRowGraph:
    """Directed K-NN graph weighted by cosine similarity; ties go to the smaller index."""
    features = as_matrix("features", features)
    size = features.shape[0]
    if size < 2:
        raise GraphSizeError(f"a graph needs at least 2 nodes, got {size}")
    if knn_k < 1:
        raise ParameterError(f"knn_k must be >= 1, got {knn_k}")

    k = min(knn_k, size - 1)
    similarity = features @ features.T
    np.fill_diagonal(similarity, -np.inf)
    # stable sort keeps equal similarities in ascending index order
    order = np.argsort(-similarity, axis=1, kind="stable")[:, :k]
    neighbours = np.sort(order, axis=1)
    weights = np.take_along_axis(similarity, neighbours, axis=1)

    return SparseRowGraph(
        size,
        np.arange(0, size * k + 1, k, dtype=np.int64),
        neighbours.reshape(-1).astype(np.int64),
        weights.reshape(-1),
    )


def normalize_teacher_graph(g: SparseRowGraph) -> SparseRowGraph:
    """Softmax of each row over its connected entries only."""
    normalized = np.empty_like(g.weights)
    for i in range(g.size):
        start, stop = g.indptr[i], g.indptr[i + 1]
        if start == stop:
            raise ConsistencyError(f"row {i} of the teacher graph has no neighbours")
        normalized[start:stop] = row_softmax(g.weights[start:stop].reshape(1, -1), 1.0)[0]

    return g.with_weights(normalized)


def fuse_teacher_graphs(graphs: Sequence[SparseRowGraph]) -> SparseRowGraph:
    """Average of normalised teacher graphs; support is the union of supports."""
    if not graphs:
        raise ParameterError("at least one teacher graph is required")

    size = graphs[0].size
    if any(g.size != size for g in graphs):
        raise DimensionError(f"teacher graph sizes differ: {[g.size for g in graphs]}")

    total = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    for g in graphs:
        total += g.to_dense()
        mask[g.row_ids(), g.indices] = True
    total /= len(graphs)

    rows, cols = np.nonzero(mask)
    counts = np.bincount(rows, minlength=size)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return SparseRowGraph(size, indptr, cols.astype(np.int64), total[rows, cols])


def build_student_graph(features: Matrix, beta: float) -> DenseRowStochastic:
    """w_ik = softmax_k(f_i . f_k / beta) over k != i."""
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")

    features = as_matrix("features", features)
    if features.shape[0] < 2:
        raise GraphSizeError(f"a graph needs at least 2 nodes, got {features.shape[0]}")

    similarity = features @ features.T
    np.fill_diagonal(similarity, -np.inf)
    return DenseRowStochastic(row_softmax(similarity, beta), features, beta)


def student_graph_backward(graph: DenseRowStochastic, grad_weights: Matrix) -> Matrix:
    """dL/d(features) given dL/d(weights) of a student graph."""
    if grad_weights.shape != graph.weights.shape:
        raise DimensionError(f"weight gradient {grad_weights.shape} != graph {graph.weights.shape}")

    grad_similarity = row_softmax_backward(graph.weights, grad_weights, graph.beta)
    np.fill_diagonal(grad_similarity, 0.0)
    return (grad_similarity + grad_similarity.T) @ graph.features


def dump_graph(g: SparseRowGraph, path: Union[str, Path]) -> None:
    """Write `i k weight` lines sorted by (i, k), 9 significant digits."""
    edges = sorted(g.to_networkx().edges(data="weight"))
    lines = [f"{i} {k} {weight:.9g}" for i, k, weight in edges]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    logger.debug(f"graph with {len(lines)} edges dumped to {path}")
