"""Predicate refinement from label-embedding geometry.

A predicted predicate distribution is re-ranked by a per-predicate affinity
derived from Euclidean distances between the pair's label embeddings (and the
originally predicted predicate's embedding) and every predicate embedding.
Distances are mapped through exp(-d) so that semantically close predicates are
boosted rather than penalized.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ingest import EmbeddingTable
from .metrics import PairPrediction

DEFAULT_ALPHA = 0.35


@dataclass(frozen=True, eq=False)
class RefinementVector:
    """Distance profile ``v`` over predicates and its affinity transform ``w = exp(-v)``."""

    v: np.ndarray
    w: np.ndarray


def distance_vector(vector: np.ndarray, predicates: EmbeddingTable) -> np.ndarray:
    """Euclidean distance from ``vector`` to every predicate embedding."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (predicates.dim,):
        raise ValueError(
            f"dimension mismatch: vector has shape {vector.shape}, table dim {predicates.dim}"
        )
    return np.linalg.norm(predicates.vectors - vector, axis=1)


def refinement_vector(
    subj_emb: np.ndarray,
    obj_emb: np.ndarray,
    pred_emb: np.ndarray,
    predicates: EmbeddingTable,
    alpha: float = DEFAULT_ALPHA,
) -> RefinementVector:
    """Blend object-side and predicate-side distance profiles.

    ``alpha`` weighs how much the subject/object embeddings count against the
    originally predicted predicate's embedding.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    v = alpha * (
        distance_vector(subj_emb, predicates) + distance_vector(obj_emb, predicates)
    ) + (1.0 - alpha) * distance_vector(pred_emb, predicates)
    return RefinementVector(v=v, w=np.exp(-v))


def refine(probs: np.ndarray, rv: RefinementVector) -> tuple[int, np.ndarray]:
    """Re-rank a predicate distribution by elementwise affinity.

    Returns the refined top predicate (ties broken by lowest index) and the
    renormalized score vector used for ranking.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != rv.w.shape:
        raise ValueError(
            f"length mismatch: distribution {probs.shape} vs refinement {rv.w.shape}"
        )
    scores = probs * rv.w
    total = scores.sum()
    if total <= 0.0:
        raise ValueError("degenerate refinement: all refined scores are zero")
    scores = scores / total
    return int(np.argmax(scores)), scores


def refine_dataset(
    predictions: list[PairPrediction],
    object_embeddings: EmbeddingTable,
    predicate_embeddings: EmbeddingTable,
    alpha: float = DEFAULT_ALPHA,
) -> list[PairPrediction]:
    """Refine every pair prediction's score vector and top predicate.

    The subject/object embeddings come from each pair's predicted labels, and
    the predicate-side embedding from the pre-refinement argmax predicate.
    """
    refined: list[PairPrediction] = []
    cache: dict[tuple[int, int, int], RefinementVector] = {}
    for pair in predictions:
        pre_top = int(np.argmax(pair.probs))
        key = (pair.subj_label, pair.obj_label, pre_top)
        rv = cache.get(key)
        if rv is None:
            rv = refinement_vector(
                object_embeddings.vector(pair.subj_label),
                object_embeddings.vector(pair.obj_label),
                predicate_embeddings.vector(pre_top),
                predicate_embeddings,
                alpha,
            )
            cache[key] = rv
        _, scores = refine(pair.probs, rv)
        refined.append(replace(pair, probs=scores))
    return refined
