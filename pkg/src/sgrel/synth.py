"""Deterministic synthetic scene-graph data for desk-scale experiments.

Object labels live in embedding-space clusters, each predicate is owned by one
ordered cluster pair, and the gold predicate of a relation is a pure function
of the two object labels. Region features are noisy linear images of the label
embeddings, so a semantics-aware model can in principle generalize to label
pairs it never saw together (the zero-shot split withholds exactly a configured
fraction of test signatures from train). Predicate frequencies follow a Zipf
law to reproduce a long tail.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    BoundingBox,
    Dataset,
    LabelSpace,
    ObjectInstance,
    SceneGraphAnnotation,
    Signature,
    Triple,
    OBJECT,
    PREDICATE,
)
from .ingest import EmbeddingTable
from .metrics import PairPrediction
from .seeding import substream


@dataclass(frozen=True)
class SynthConfig:
    """Sizes, skew, and noise of the generated corpus; everything hangs off one seed."""

    c_obj: int = 30
    c_pred: int = 20
    d_roi: int = 32
    d_emb: int = 16
    images: int = 300
    zipf_s: float = 1.5
    zero_shot_fraction: float = 0.1
    noise_sigma: float = 0.5
    seed: int = 0
    # Generator shape knobs.
    min_triples: int = 1
    max_triples: int = 4
    max_distractors: int = 2
    image_size: float = 1000.0
    embedding_scale: float = 160.0
    intra_cluster_sigma: float = 1.0
    test_fraction: float = 0.3
    val_fraction: float = 0.1

    def validate(self) -> None:
        if min(self.c_obj, self.c_pred, self.d_roi, self.d_emb, self.images) < 1:
            raise ValueError("all sizes must be >= 1")
        if not 0.0 <= self.zero_shot_fraction < 1.0:
            raise ValueError("zero_shot_fraction must lie in [0, 1)")
        if self.zipf_s < 0.0:
            raise ValueError("zipf_s must be non-negative")
        if self.min_triples < 1 or self.max_triples < self.min_triples:
            raise ValueError("need 1 <= min_triples <= max_triples")
        n_clusters = _num_clusters(self.c_pred)
        if self.c_obj < n_clusters:
            raise ValueError(
                f"infeasible config: need at least {n_clusters} object labels "
                f"for {self.c_pred} predicates"
            )


@dataclass(frozen=True, eq=False)
class GenerativeMap:
    """Ground truth of the generator: which predicate a label pair produces."""

    label_cluster: tuple[int, ...]
    pair_predicate: dict[tuple[int, int], int]

    def predicate_for(self, subj_label: int, obj_label: int) -> int | None:
        key = (self.label_cluster[subj_label], self.label_cluster[obj_label])
        return self.pair_predicate.get(key)

    def to_json_dict(self) -> dict:
        return {
            "label_cluster": list(self.label_cluster),
            "pairs": sorted([i, j, p] for (i, j), p in self.pair_predicate.items()),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "GenerativeMap":
        return cls(
            label_cluster=tuple(int(c) for c in payload["label_cluster"]),
            pair_predicate={(int(i), int(j)): int(p) for i, j, p in payload["pairs"]},
        )


@dataclass(eq=False)
class SynthData:
    train: Dataset
    val: Dataset
    test: Dataset
    object_embeddings: EmbeddingTable
    predicate_embeddings: EmbeddingTable
    map: GenerativeMap
    withheld: frozenset[Signature]


def _num_clusters(c_pred: int) -> int:
    return int(math.ceil(math.sqrt(c_pred)))


def zipf_probabilities(c: int, s: float) -> np.ndarray:
    """Rank-frequency law over predicate indices; s=0 degenerates to uniform."""
    weights = 1.0 / np.power(np.arange(1, c + 1, dtype=np.float64), s)
    return weights / weights.sum()


def _label_names(prefix: str, count: int) -> tuple[str, ...]:
    width = len(str(count - 1))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(count))


def _random_box(rng: np.random.Generator, size: float) -> BoundingBox:
    x1 = rng.uniform(0.0, 0.75 * size)
    y1 = rng.uniform(0.0, 0.75 * size)
    w = rng.uniform(0.05 * size, 0.25 * size)
    h = rng.uniform(0.05 * size, 0.25 * size)
    return BoundingBox(x1, y1, min(x1 + w, size), min(y1 + h, size))


def _generate_images(
    rng: np.random.Generator,
    count: int,
    prefix: str,
    cfg: SynthConfig,
    zipf_p: np.ndarray,
    allowed_pairs: list[list[tuple[int, int]]],
    anchors: np.ndarray,
) -> list[SceneGraphAnnotation]:
    annotations = []
    for n in range(count):
        n_triples = int(rng.integers(cfg.min_triples, cfg.max_triples + 1))
        labels: list[int] = []
        preds: list[int] = []
        for _ in range(n_triples):
            k = int(rng.choice(cfg.c_pred, p=zipf_p))
            pool = allowed_pairs[k]
            s_label, o_label = pool[int(rng.integers(len(pool)))]
            labels.extend([s_label, o_label])
            preds.append(k)
        for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
            labels.append(int(rng.integers(cfg.c_obj)))

        objects = []
        for oid, label in enumerate(labels):
            box = _random_box(rng, cfg.image_size)
            feature = anchors[label] + rng.normal(0.0, cfg.noise_sigma, anchors.shape[1])
            objects.append(ObjectInstance(object_id=oid, label=label, box=box, feature=feature))
        triples = tuple(
            Triple(subj=2 * t, pred=preds[t], obj=2 * t + 1) for t in range(n_triples)
        )
        annotations.append(
            SceneGraphAnnotation(
                image_id=f"{prefix}-{n:05d}",
                width=cfg.image_size,
                height=cfg.image_size,
                objects=tuple(objects),
                triples=triples,
            )
        )
    return annotations


def _coverage_images(
    rng: np.random.Generator,
    signatures: list[Signature],
    cfg: SynthConfig,
    anchors: np.ndarray,
) -> list[SceneGraphAnnotation]:
    """Minimal extra train images guaranteeing every given signature occurs."""
    annotations = []
    for n, chunk_start in enumerate(range(0, len(signatures), cfg.max_triples)):
        chunk = signatures[chunk_start : chunk_start + cfg.max_triples]
        objects = []
        triples = []
        for t, (s_label, pred, o_label) in enumerate(chunk):
            for offset, label in ((0, s_label), (1, o_label)):
                box = _random_box(rng, cfg.image_size)
                feature = anchors[label] + rng.normal(0.0, cfg.noise_sigma, anchors.shape[1])
                objects.append(
                    ObjectInstance(object_id=2 * t + offset, label=label, box=box, feature=feature)
                )
            triples.append(Triple(subj=2 * t, pred=pred, obj=2 * t + 1))
        annotations.append(
            SceneGraphAnnotation(
                image_id=f"train-cover-{n:05d}",
                width=cfg.image_size,
                height=cfg.image_size,
                objects=tuple(objects),
                triples=tuple(triples),
            )
        )
    return annotations


def _signatures_of(annotations: list[SceneGraphAnnotation]) -> set[Signature]:
    out: set[Signature] = set()
    for a in annotations:
        by_id = {o.object_id: o for o in a.objects}
        for t in a.triples:
            out.add((by_id[t.subj].label, t.pred, by_id[t.obj].label))
    return out


def generate(cfg: SynthConfig) -> SynthData:
    """Produce train/val/test splits, both embedding tables, and the generative map.

    The test split is drawn first; a fraction of its distinct signatures is then
    withheld from train (and val) exactly, while every non-withheld test
    signature is forced to occur in train. Byte-identical output per seed.
    """
    cfg.validate()
    n_clusters = _num_clusters(cfg.c_pred)

    # Semantic layout: unit cluster directions, labels jittered around them.
    # Embedding tables are scaled up so refinement distances have contrast,
    # while region features are built from the unit-scale geometry.
    rng_emb = substream(cfg.seed, "synth.embeddings")
    unit_centers = rng_emb.normal(size=(n_clusters, cfg.d_emb))
    unit_centers = unit_centers / np.linalg.norm(unit_centers, axis=1)[:, None]
    centers = unit_centers * cfg.embedding_scale
    label_cluster = tuple(i % n_clusters for i in range(cfg.c_obj))
    label_jitter = rng_emb.normal(0.0, cfg.intra_cluster_sigma, (cfg.c_obj, cfg.d_emb))
    object_vectors = centers[list(label_cluster)] + label_jitter

    # One ordered cluster pair per predicate. Same-cluster pairs are assigned
    # first (they anchor a predicate right at its cluster), then cross-cluster
    # pairs; which predicate index a pair lands on is a seeded shuffle.
    rng_map = substream(cfg.seed, "synth.map")
    diagonal = [(i, i) for i in range(n_clusters)]
    off_diagonal = [(i, j) for i in range(n_clusters) for j in range(n_clusters) if i != j]
    pool = [diagonal[int(i)] for i in rng_map.permutation(len(diagonal))]
    pool += [off_diagonal[int(i)] for i in rng_map.permutation(len(off_diagonal))]
    chosen = pool[: cfg.c_pred]
    assignment = rng_map.permutation(cfg.c_pred)
    pair_predicate = {pair: int(assignment[i]) for i, pair in enumerate(chosen)}
    gen_map = GenerativeMap(label_cluster=label_cluster, pair_predicate=pair_predicate)

    # Predicate embeddings sit between the two clusters they connect (on the
    # cluster itself for same-cluster pairs), with small absolute jitter.
    home = {k: pair for pair, k in pair_predicate.items()}
    predicate_vectors = np.stack(
        [
            0.5 * (centers[home[k][0]] + centers[home[k][1]])
            + rng_emb.normal(0.0, 0.5 * cfg.intra_cluster_sigma, cfg.d_emb)
            for k in range(cfg.c_pred)
        ]
    )

    # Region-feature anchors: fixed linear image of the unit-scale label
    # geometry, renormalized so noise_sigma directly controls the SNR.
    unit_labels = unit_centers[list(label_cluster)] + label_jitter / cfg.embedding_scale
    projection = rng_emb.normal(size=(cfg.d_emb, cfg.d_roi)) / np.sqrt(cfg.d_emb)
    anchors = unit_labels @ projection
    anchors = anchors / np.linalg.norm(anchors, axis=1)[:, None]

    cluster_labels = [
        [i for i in range(cfg.c_obj) if label_cluster[i] == c] for c in range(n_clusters)
    ]
    full_pairs: list[list[tuple[int, int]]] = []
    for k in range(cfg.c_pred):
        ci, cj = home[k]
        full_pairs.append([(s, o) for s in cluster_labels[ci] for o in cluster_labels[cj]])

    zipf_p = zipf_probabilities(cfg.c_pred, cfg.zipf_s)
    n_test = int(round(cfg.images * cfg.test_fraction))
    n_val = int(round(cfg.images * cfg.val_fraction))
    n_train = max(cfg.images - n_test - n_val, 1)

    test_annotations = _generate_images(
        substream(cfg.seed, "synth.test"), n_test, "test", cfg, zipf_p, full_pairs, anchors
    )

    # Withhold an exact fraction of distinct test signatures from train.
    test_signatures = sorted(_signatures_of(test_annotations))
    n_withheld = int(round(cfg.zero_shot_fraction * len(test_signatures)))
    rng_withhold = substream(cfg.seed, "synth.withhold")
    withheld_idx = rng_withhold.choice(len(test_signatures), size=n_withheld, replace=False)
    withheld = {test_signatures[int(i)] for i in withheld_idx}

    train_pairs: list[list[tuple[int, int]]] = []
    for k in range(cfg.c_pred):
        kept = [(s, o) for s, o in full_pairs[k] if (s, k, o) not in withheld]
        if not kept:
            raise ValueError(
                f"infeasible config: withholding removed every label pair of predicate {k}; "
                "lower zero_shot_fraction"
            )
        train_pairs.append(kept)

    train_annotations = _generate_images(
        substream(cfg.seed, "synth.train"), n_train, "train", cfg, zipf_p, train_pairs, anchors
    )
    missing = sorted((set(test_signatures) - withheld) - _signatures_of(train_annotations))
    train_annotations += _coverage_images(
        substream(cfg.seed, "synth.coverage"), missing, cfg, anchors
    )
    val_annotations = _generate_images(
        substream(cfg.seed, "synth.val"), n_val, "val", cfg, zipf_p, train_pairs, anchors
    )

    object_space = LabelSpace(kind=OBJECT, names=_label_names("obj", cfg.c_obj))
    predicate_space = LabelSpace(kind=PREDICATE, names=_label_names("pred", cfg.c_pred))

    def dataset(split: str, annotations: list[SceneGraphAnnotation]) -> Dataset:
        return Dataset(
            split=split,
            annotations=tuple(annotations),
            object_space=object_space,
            predicate_space=predicate_space,
            d_roi=cfg.d_roi,
        )

    return SynthData(
        train=dataset("train", train_annotations),
        val=dataset("val", val_annotations),
        test=dataset("test", test_annotations),
        object_embeddings=EmbeddingTable(space=object_space, vectors=object_vectors),
        predicate_embeddings=EmbeddingTable(space=predicate_space, vectors=predicate_vectors),
        map=gen_map,
        withheld=frozenset(withheld),
    )


def oracle_predictions(test: Dataset, gen_map: GenerativeMap) -> list[PairPrediction]:
    """Perfect predictions for every annotated pair, read off the generative map."""
    predictions: list[PairPrediction] = []
    c_pred = test.predicate_space.size
    for annotation in test.annotations:
        seen: set[tuple[int, int]] = set()
        for triple in annotation.triples:
            key = (triple.subj, triple.obj)
            if key in seen:
                continue
            seen.add(key)
            subj = annotation.object_by_id(triple.subj)
            obj = annotation.object_by_id(triple.obj)
            gold = gen_map.predicate_for(subj.label, obj.label)
            if gold is None:
                raise ValueError(
                    f"image {annotation.image_id}: pair ({subj.label}, {obj.label}) "
                    "is not covered by the generative map"
                )
            probs = np.zeros(c_pred)
            probs[gold] = 1.0
            predictions.append(
                PairPrediction(
                    image_id=annotation.image_id,
                    subj_id=subj.object_id,
                    obj_id=obj.object_id,
                    subj_label=subj.label,
                    obj_label=obj.label,
                    subj_box=subj.box,
                    obj_box=obj.box,
                    probs=probs,
                )
            )
    return predictions


def save_map(gen_map: GenerativeMap, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(gen_map.to_json_dict(), sort_keys=True) + "\n", encoding="utf-8"
    )


def load_map(path: str | Path) -> GenerativeMap:
    return GenerativeMap.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))
