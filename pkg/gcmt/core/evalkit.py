"""Retrieval evaluation: mAP and CMC under the cross-camera protocol."""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from gcmt.core.errors import DimensionError, EvaluationError
from gcmt.core.model import Network, forward_features
from gcmt.core.numcore import as_matrix
from gcmt.core.synthdata import SyntheticDataset
from gcmt.typing import IndexArray, Matrix
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

EXPORT_RANKS = 10


@dataclass(frozen=True)
class EvalResult:
    """mAP, CMC indexed by rank - 1, and query bookkeeping."""

    map: float
    cmc: Tuple[float, ...]
    query_count: int
    excluded_count: int = 0

    def rank(self, k: int) -> float:
        """Rank-k accuracy; ranks past the gallery size repeat the last value."""
        if not self.cmc:
            return 0.0
        return self.cmc[min(k, len(self.cmc)) - 1]


def _check_inputs(
    query_features: Matrix,
    query_ids: Sequence[int],
    query_cams: Sequence[int],
    gallery_features: Matrix,
    gallery_ids: Sequence[int],
    gallery_cams: Sequence[int],
) -> Tuple[Matrix, IndexArray, IndexArray, Matrix, IndexArray, IndexArray]:
    query = as_matrix("query_features", query_features)
    gallery = as_matrix("gallery_features", gallery_features)
    q_ids, q_cams = np.asarray(query_ids, dtype=np.int64), np.asarray(query_cams, dtype=np.int64)
    g_ids, g_cams = np.asarray(gallery_ids, dtype=np.int64), np.asarray(gallery_cams, dtype=np.int64)

    if query.shape[1] != gallery.shape[1]:
        raise DimensionError(f"query width {query.shape[1]} != gallery width {gallery.shape[1]}")
    if not len(q_ids) == len(q_cams) == query.shape[0]:
        raise DimensionError("query labels and features differ in length")
    if not len(g_ids) == len(g_cams) == gallery.shape[0]:
        raise DimensionError("gallery labels and features differ in length")

    return query, q_ids, q_cams, gallery, g_ids, g_cams


def _finish(aps: List[float], cmc_sum: Matrix, query_count: int) -> EvalResult:
    excluded = query_count - len(aps)
    if not aps:
        raise EvaluationError("no query has a valid match in the gallery", excluded=excluded)
    if excluded:
        logger.warning(f"{excluded} of {query_count} queries have no valid gallery match and were excluded")

    return EvalResult(float(np.mean(aps)), tuple(float(v) for v in cmc_sum / len(aps)), query_count, excluded)


def evaluate(
    query_features: Matrix,
    query_ids: Sequence[int],
    query_cams: Sequence[int],
    gallery_features: Matrix,
    gallery_ids: Sequence[int],
    gallery_cams: Sequence[int],
) -> EvalResult:
    """Rank the gallery by dot product per query, drop same identity + camera entries, score."""
    query, q_ids, q_cams, gallery, g_ids, g_cams = _check_inputs(
        query_features, query_ids, query_cams, gallery_features, gallery_ids, gallery_cams
    )

    # stable sort keeps equal similarities in gallery index order
    indices = np.argsort(-(query @ gallery.T), axis=1, kind="stable")
    matches = g_ids[indices] == q_ids[:, None]

    aps: List[float] = []
    cmc_sum = np.zeros(gallery.shape[0])
    for q_idx in range(query.shape[0]):
        order = indices[q_idx]
        keep = ~((g_ids[order] == q_ids[q_idx]) & (g_cams[order] == q_cams[q_idx]))
        hits = matches[q_idx][keep]
        if not np.any(hits):
            continue

        cmc_sum[int(np.argmax(hits)) :] += 1.0

        precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
        aps.append(float(np.sum(precision[hits]) / np.sum(hits)))

    result = _finish(aps, cmc_sum, query.shape[0])
    logger.info(f"mAP {result.map:.4f}, rank-1 {result.rank(1):.4f} over {len(aps)} queries")
    return result


def brute_force_oracle(
    query_features: Matrix,
    query_ids: Sequence[int],
    query_cams: Sequence[int],
    gallery_features: Matrix,
    gallery_ids: Sequence[int],
    gallery_cams: Sequence[int],
) -> EvalResult:
    """Reference scorer: explicit per-query sort and per-position recount."""
    query, q_ids, q_cams, gallery, g_ids, g_cams = _check_inputs(
        query_features, query_ids, query_cams, gallery_features, gallery_ids, gallery_cams
    )
    size = gallery.shape[0]

    aps: List[float] = []
    cmc_sum = np.zeros(size)
    for q_idx in range(query.shape[0]):
        scored = [(-float(query[q_idx] @ gallery[g]), g) for g in range(size)]
        ranked = [
            g
            for _, g in sorted(scored)
            if not (g_ids[g] == q_ids[q_idx] and g_cams[g] == q_cams[q_idx])
        ]
        relevant = [position for position, g in enumerate(ranked) if g_ids[g] == q_ids[q_idx]]
        if not relevant:
            continue

        precisions = []
        for position in relevant:
            found = sum(1 for g in ranked[: position + 1] if g_ids[g] == q_ids[q_idx])
            precisions.append(found / (position + 1))
        aps.append(sum(precisions) / len(precisions))

        for k in range(size):
            if any(g_ids[g] == q_ids[q_idx] for g in ranked[: k + 1]):
                cmc_sum[k] += 1.0

    return _finish(aps, cmc_sum, query.shape[0])


def evaluate_network(network: Network, dataset: SyntheticDataset) -> EvalResult:
    """Encode the query and gallery splits of `dataset` and evaluate."""
    query = dataset.split("query")
    gallery = dataset.split("gallery")
    if len(query) == 0 or len(gallery) == 0:
        raise EvaluationError(f"dataset has {len(query)} query and {len(gallery)} gallery samples")

    query_features, _ = forward_features(network.encoder, query.vectors)
    gallery_features, _ = forward_features(network.encoder, gallery.vectors)
    return evaluate(
        query_features, query.identities, query.cameras, gallery_features, gallery.identities, gallery.cameras
    )


def format_result(result: EvalResult) -> str:
    """TOML text with map and cmc[0..9] at 6 decimals."""
    ranks = [result.rank(k) for k in range(1, EXPORT_RANKS + 1)]
    return "\n".join(
        [
            "[result]",
            f"map = {result.map:.6f}",
            f"cmc = [{', '.join(f'{value:.6f}' for value in ranks)}]",
            f"query_count = {result.query_count}",
            f"excluded_count = {result.excluded_count}",
            "",
        ]
    )


def export_result(result: EvalResult, path: Union[str, Path]) -> None:
    """Write `format_result` to `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_result(result), encoding="utf-8")
    logger.info(f"evaluation result written to {path}")
