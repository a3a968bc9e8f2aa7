"""Recall-guided down-sampling of the training set.

Head predicates (count above a threshold) are thinned in inverse proportion to
how well a baseline already recalls them, so abundant-but-hard predicates keep
their data while abundant-and-easy ones shrink. Up-sampling is never applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Dataset, SceneGraphAnnotation
from .ingest import RecallTable
from .seeding import substream

DEFAULT_TAU = 1100.0
DEFAULT_BETA = 0.3


@dataclass(frozen=True, eq=False)
class PredicateStats:
    """Training triple count and baseline recall per predicate."""

    counts: np.ndarray  # (C_pred,) int
    recalls: RecallTable


@dataclass(frozen=True, eq=False)
class SamplingPlan:
    """Per-predicate keep rates and target counts; seed pins the draw."""

    counts: np.ndarray   # (C_pred,) original triple counts
    rates: np.ndarray    # (C_pred,) in (0, 1]
    targets: np.ndarray  # (C_pred,) post-sampling counts
    seed: int
    tau: float
    beta: float


def count_predicates(dataset: Dataset) -> np.ndarray:
    """Triple count per predicate index over the whole dataset."""
    c = dataset.predicate_space.size
    preds = [t.pred for a in dataset.annotations for t in a.triples]
    return np.bincount(np.asarray(preds, dtype=np.int64), minlength=c)[:c]


def sampling_rate(
    count: float,
    recall: float,
    tau: float = DEFAULT_TAU,
    beta: float = DEFAULT_BETA,
) -> float:
    """Keep rate for one predicate given its training count and baseline recall.

    Below the head threshold ``tau`` everything is kept. A never-recalled
    predicate (recall 0) is also kept whole: it is exactly the case the
    strategy protects.
    """
    if tau <= 0 or beta <= 0:
        raise ValueError(f"tau and beta must be positive, got tau={tau}, beta={beta}")
    if count < tau:
        return 1.0
    if recall <= 0.0:
        return 1.0
    return float(min(tau / (count * beta * recall), 1.0))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_sampling_plan(
    stats: PredicateStats,
    tau: float = DEFAULT_TAU,
    beta: float = DEFAULT_BETA,
    seed: int = 0,
) -> SamplingPlan:
    counts = np.asarray(stats.counts, dtype=np.int64)
    if counts.shape != stats.recalls.values.shape:
        raise ValueError("counts and recalls must cover the same predicate space")
    rates = np.array(
        [sampling_rate(int(n), float(c), tau, beta) for n, c in zip(counts, stats.recalls.values)]
    )
    targets = np.array(
        [_round_half_up(int(n) * r) for n, r in zip(counts, rates)], dtype=np.int64
    )
    return SamplingPlan(
        counts=counts, rates=rates, targets=targets, seed=seed, tau=tau, beta=beta
    )


def resample(train: Dataset, plan: SamplingPlan) -> Dataset:
    """Keep exactly ``plan.targets[j]`` triples per predicate, drawn without replacement.

    Annotations keep all their objects even when every triple is dropped, and
    within-annotation triple order is preserved. Deterministic given the plan's
    seed.
    """
    c = train.predicate_space.size
    if plan.counts.shape[0] != c:
        raise ValueError("plan does not cover this dataset's predicate space")

    # Global enumeration of triples per predicate, in dataset order.
    positions: list[list[tuple[int, int]]] = [[] for _ in range(c)]
    for a_idx, annotation in enumerate(train.annotations):
        for t_idx, triple in enumerate(annotation.triples):
            positions[triple.pred].append((a_idx, t_idx))

    rng = substream(plan.seed, "sampling.resample")
    kept: set[tuple[int, int]] = set()
    for pred in range(c):
        pool = positions[pred]
        target = int(plan.targets[pred])
        if len(pool) != int(plan.counts[pred]):
            raise ValueError(
                f"plan was built for different data: predicate {pred} has {len(pool)} "
                f"triples, plan recorded {int(plan.counts[pred])}"
            )
        if target >= len(pool):
            kept.update(pool)
            continue
        chosen = rng.choice(len(pool), size=target, replace=False)
        kept.update(pool[i] for i in chosen)

    annotations: list[SceneGraphAnnotation] = []
    for a_idx, annotation in enumerate(train.annotations):
        triples = tuple(
            t for t_idx, t in enumerate(annotation.triples) if (a_idx, t_idx) in kept
        )
        annotations.append(replace(annotation, triples=triples))
    return Dataset(
        split=train.split,
        annotations=tuple(annotations),
        object_space=train.object_space,
        predicate_space=train.predicate_space,
        d_roi=train.d_roi,
    )
