import numpy as np
import pytest

from sgrel.core import (
    BoundingBox,
    Dataset,
    LabelSpace,
    OBJECT,
    PREDICATE,
    ObjectInstance,
    SceneGraphAnnotation,
    Triple,
)
from sgrel.ingest import EmbeddingTable

D_ROI = 5


def make_spaces(c_obj=4, c_pred=3):
    objects = LabelSpace(kind=OBJECT, names=tuple(f"thing{i}" for i in range(c_obj)))
    predicates = LabelSpace(kind=PREDICATE, names=tuple(f"rel{i}" for i in range(c_pred)))
    return objects, predicates


def make_box(x1=0.0, y1=0.0, x2=10.0, y2=10.0):
    return BoundingBox(x1, y1, x2, y2)


def make_object(object_id, label=0, feature=None, box=None, d_roi=D_ROI):
    if feature is None:
        feature = np.full(d_roi, float(object_id) + 1.0)
    return ObjectInstance(
        object_id=object_id,
        label=label,
        box=box or make_box(object_id * 5.0, 0.0, object_id * 5.0 + 20.0, 20.0),
        feature=np.asarray(feature, dtype=np.float64),
    )


def make_annotation(image_id="img0", objects=None, triples=None, width=100.0, height=100.0):
    if objects is None:
        objects = (make_object(0, 0), make_object(1, 1))
    if triples is None:
        triples = (Triple(subj=0, pred=0, obj=1),)
    return SceneGraphAnnotation(
        image_id=image_id,
        width=width,
        height=height,
        objects=tuple(objects),
        triples=tuple(triples),
    )


def make_dataset(annotations, spaces=None, split="train", d_roi=D_ROI):
    objects, predicates = spaces or make_spaces()
    return Dataset(
        split=split,
        annotations=tuple(annotations),
        object_space=objects,
        predicate_space=predicates,
        d_roi=d_roi,
    )


@pytest.fixture
def spaces():
    return make_spaces()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_embeddings(space, dim, rng):
    return EmbeddingTable(space=space, vectors=rng.normal(size=(space.size, dim)))
