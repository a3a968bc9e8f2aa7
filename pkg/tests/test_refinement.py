import numpy as np
import pytest

from sgrel.core import LabelSpace, OBJECT, PREDICATE
from sgrel.ingest import EmbeddingTable
from sgrel.metrics import PairPrediction
from sgrel.refinement import (
    RefinementVector,
    distance_vector,
    refine,
    refine_dataset,
    refinement_vector,
)

from conftest import make_box


def table(vectors, kind=PREDICATE, prefix="rel"):
    vectors = np.asarray(vectors, dtype=np.float64)
    space = LabelSpace(kind=kind, names=tuple(f"{prefix}{i}" for i in range(len(vectors))))
    return EmbeddingTable(space=space, vectors=vectors)


class TestDistanceVector:
    def test_self_distance_is_zero(self):
        predicates = table([[1.0, 2.0], [0.5, 0.5]])
        assert distance_vector(np.array([1.0, 2.0]), predicates)[0] == 0.0

    def test_hand_values(self):
        predicates = table([[1e-9, 0.0], [1.0, 0.0]])
        d = distance_vector(np.array([1.0, 0.0]), predicates)
        np.testing.assert_allclose(d, [1.0, 0.0], atol=1e-8)

    def test_identical_embeddings_give_constant_vector(self):
        predicates = table([[2.0, 1.0], [2.0, 1.0], [2.0, 1.0]])
        d = distance_vector(np.array([0.0, 0.0]), predicates)
        assert np.ptp(d) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            distance_vector(np.array([1.0, 0.0, 0.0]), table([[1.0, 0.0]]))


class TestRefinementVector:
    def test_hand_arithmetic(self):
        # alpha=0.5, subj=obj=(1,0), original predicate at (0,0),
        # predicates at {(0,0), (1,0)} -> v = (1, 0.5).
        predicates = table([[1e-12, 0.0], [1.0, 0.0]])
        subj = obj = np.array([1.0, 0.0])
        rv = refinement_vector(subj, obj, np.array([0.0, 0.0]), predicates, alpha=0.5)
        np.testing.assert_allclose(rv.v, [1.0, 0.5], atol=1e-9)
        np.testing.assert_allclose(rv.w, np.exp(-rv.v))

    def test_alpha_zero_peaks_at_original_predicate(self):
        predicates = table([[0.0, 1.0], [3.0, 0.0], [0.0, -2.0]])
        rv = refinement_vector(
            np.array([9.0, 9.0]), np.array([-9.0, 0.0]), predicates.vector(1), predicates, alpha=0.0
        )
        assert rv.v[1] == 0.0
        assert np.argmax(rv.w) == 1

    def test_alpha_one_ignores_predicate_embedding(self, rng):
        predicates = table(rng.normal(size=(4, 3)))
        subj, obj = rng.normal(size=3), rng.normal(size=3)
        a = refinement_vector(subj, obj, predicates.vector(0), predicates, alpha=1.0)
        b = refinement_vector(subj, obj, predicates.vector(3), predicates, alpha=1.0)
        np.testing.assert_array_equal(a.v, b.v)

    def test_alpha_out_of_range(self):
        predicates = table([[1.0, 0.0]])
        with pytest.raises(ValueError, match="alpha"):
            refinement_vector(
                np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([1.0, 0.0]), predicates, 1.5
            )

    def test_monotone_coupling_of_v_and_w(self, rng):
        predicates = table(rng.normal(size=(5, 4)))
        rv = refinement_vector(
            rng.normal(size=4), rng.normal(size=4), rng.normal(size=4), predicates
        )
        order_v = np.argsort(rv.v)
        order_w = np.argsort(-rv.w)
        np.testing.assert_array_equal(order_v, order_w)


class TestRefine:
    def test_constant_affinity_is_identity_on_argmax(self):
        rv = RefinementVector(v=np.full(3, 2.0), w=np.exp(-np.full(3, 2.0)))
        probs = np.array([0.2, 0.5, 0.3])
        idx, scores = refine(probs, rv)
        assert idx == 1
        np.testing.assert_allclose(scores, probs, atol=1e-12)

    def test_semantics_can_override_distribution(self):
        # D=(0.6, 0.4), v=(1, 0.5): scores renormalize to favor index 1.
        rv = RefinementVector(v=np.array([1.0, 0.5]), w=np.exp(-np.array([1.0, 0.5])))
        idx, scores = refine(np.array([0.6, 0.4]), rv)
        assert idx == 1
        raw = np.array([0.6 * np.exp(-1.0), 0.4 * np.exp(-0.5)])
        np.testing.assert_allclose(raw, [0.22073, 0.24261], atol=1e-5)
        np.testing.assert_allclose(scores, raw / raw.sum())

    def test_one_hot_dominance(self):
        rv = RefinementVector(v=np.array([5.0, 0.0, 1.0]), w=np.exp(-np.array([5.0, 0.0, 1.0])))
        idx, _ = refine(np.array([1.0, 0.0, 0.0]), rv)
        assert idx == 0

    def test_degenerate_refinement_rejected(self):
        rv = RefinementVector(v=np.zeros(2), w=np.exp(-np.zeros(2)))
        with pytest.raises(ValueError, match="degenerate refinement"):
            refine(np.zeros(2), rv)

    def test_tie_breaks_to_lowest_index(self):
        rv = RefinementVector(v=np.zeros(2), w=np.ones(2))
        idx, _ = refine(np.array([0.5, 0.5]), rv)
        assert idx == 0

    def test_shifting_v_by_constant_preserves_argmax(self, rng):
        for _ in range(200):
            v = rng.uniform(0.0, 4.0, size=5)
            probs = rng.dirichlet(np.ones(5))
            base, _ = refine(probs, RefinementVector(v=v, w=np.exp(-v)))
            shifted, _ = refine(probs, RefinementVector(v=v + 3.7, w=np.exp(-(v + 3.7))))
            assert base == shifted

    def test_scale_invariance_in_distribution(self, rng):
        for _ in range(100):
            v = rng.uniform(0.0, 4.0, size=4)
            rv = RefinementVector(v=v, w=np.exp(-v))
            probs = rng.dirichlet(np.ones(4))
            idx_a, scores_a = refine(probs, rv)
            idx_b, scores_b = refine(37.0 * probs, rv)
            assert idx_a == idx_b
            np.testing.assert_allclose(scores_a, scores_b, atol=1e-12)

    def test_brute_force_oracle_agreement(self, rng):
        # Exhaustive argmax over D_j * exp(-v_j) for small C.
        for _ in range(1000):
            c = int(rng.integers(2, 7))
            v = rng.uniform(0.0, 5.0, size=c)
            probs = rng.dirichlet(np.ones(c))
            idx, _ = refine(probs, RefinementVector(v=v, w=np.exp(-v)))
            best, best_score = 0, -1.0
            for j in range(c):
                score = probs[j] * np.exp(-v[j])
                if score > best_score:
                    best, best_score = j, score
            assert idx == best


class TestRefineDataset:
    def pair(self, probs, subj_label=0, obj_label=1, image_id="im0", subj_id=0, obj_id=1):
        return PairPrediction(
            image_id=image_id,
            subj_id=subj_id,
            obj_id=obj_id,
            subj_label=subj_label,
            obj_label=obj_label,
            subj_box=make_box(),
            obj_box=make_box(20.0, 0.0, 30.0, 10.0),
            probs=np.asarray(probs, dtype=np.float64),
        )

    def test_identical_predicate_embeddings_change_nothing(self, rng):
        objects = table(rng.normal(size=(3, 2)), kind=OBJECT, prefix="thing")
        predicates = table([[1.0, 1.0], [1.0, 1.0]])
        pairs = [self.pair(rng.dirichlet(np.ones(2)), subj_id=i, obj_id=i + 1) for i in range(4)]
        refined = refine_dataset(pairs, objects, predicates)
        for before, after in zip(pairs, refined):
            assert np.argmax(before.probs) == np.argmax(after.probs)
            np.testing.assert_allclose(before.probs, after.probs, atol=1e-12)

    def test_refinement_flips_biased_pair(self):
        # Object pair semantically at predicate 1, distribution mildly at 0.
        objects = table([[1.0, 0.0], [1.0, 0.0]], kind=OBJECT, prefix="thing")
        predicates = table([[-3.0, 0.0], [1.0, 0.0]])
        refined = refine_dataset([self.pair([0.6, 0.4])], objects, predicates, alpha=0.9)
        assert int(np.argmax(refined[0].probs)) == 1

    def test_empty_prediction_set(self, rng):
        objects = table(rng.normal(size=(2, 2)), kind=OBJECT, prefix="thing")
        predicates = table(rng.normal(size=(2, 2)))
        assert refine_dataset([], objects, predicates) == []
