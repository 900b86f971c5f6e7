import numpy as np
import pytest

from ..data import LVLV_LABELS, PITCH_LABELS, gen_synthetic_corpus
from ..model import ArchSpec, build_classifier, fingerprint
from ..retrieval import (
    FeatureIndex,
    all_neighbors,
    build_feature_index,
    index_from_bytes,
    load_index,
    query_knn,
)
from ..utils import (
    BadMagicError,
    DataError,
    FingerprintMismatchError,
    ShapeMismatchError,
    TruncatedDataError,
    UsageError,
    VocabularyMismatchError,
)

SMALL = dict(conv_channels=(4, 4, 4), fc1_width=16)


@pytest.fixture
def toy_index():
    features = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 0.0]])
    return FeatureIndex(
        ["a", "d", "c", "b"],
        ["Lu", "Zhang", "Lu", "Siku"],
        ["Dalu", "Wuyi", "Dalu", "Zhezi"],
        features,
        "fp",
    )


@pytest.fixture(scope="module")
def lvlv_setup():
    corpus = gen_synthetic_corpus("lvlvpu", 2, n_editions=2, seed=0)
    arch = ArchSpec(n_classes=17, **SMALL)
    model = build_classifier(arch, np.random.default_rng(0), LVLV_LABELS)
    return corpus, model


def test_query_order_and_ties(toy_index):
    """Ascending distance, equal distances by ascending id."""
    hits = query_knn(toy_index, np.array([0.0, 0.0]), k=3)
    assert [h.instance_id for h in hits] == ["a", "b", "d"]
    assert [h.distance for h in hits] == [0.0, 1.0, 1.0]
    assert hits[1].edition == "Siku" and hits[1].label == "Zhezi"
    far = query_knn(toy_index, np.array([0.0, 3.0]), k=1)
    assert far[0].instance_id == "c"


def test_query_matches_brute_force():
    """100 queries against 1000 rows of 128 features return the true 10 nearest."""
    rng = np.random.default_rng(3)
    features = rng.normal(size=(1000, 128)).astype(np.float32)
    ids = [f"i{n:04d}" for n in range(1000)]
    index = FeatureIndex(ids, ["Lu"] * 1000, ["Dalu"] * 1000, features)
    assert index.dimension == 128
    for _ in range(100):
        query = rng.normal(size=128).astype(np.float32)
        dist = np.linalg.norm(features.astype(np.float64) - query, axis=1)
        expected = [ids[i] for i in np.argsort(dist, kind="stable")[:10]]
        hits = query_knn(index, query, k=10)
        assert [h.instance_id for h in hits] == expected
        np.testing.assert_allclose(
            [h.distance for h in hits], np.sort(dist)[:10], rtol=1e-9
        )


def test_query_errors(toy_index):
    with pytest.raises(UsageError):
        query_knn(toy_index, np.zeros(2), k=0)
    with pytest.raises(UsageError):
        query_knn(toy_index, np.zeros(2), k=5)
    with pytest.raises(ShapeMismatchError):
        query_knn(toy_index, np.zeros(3))
    with pytest.raises(UsageError):
        query_knn(toy_index, np.zeros((10, 10), dtype=np.uint8))
    empty = FeatureIndex([], [], [], np.zeros((0, 2)))
    with pytest.raises(DataError):
        query_knn(empty, np.zeros(2))
    with pytest.raises(DataError):
        FeatureIndex(["a", "a"], ["Lu"] * 2, ["x"] * 2, np.zeros((2, 2)))


def test_all_neighbors_excludes_self(toy_index):
    table = all_neighbors(toy_index, k=2)
    assert table["a"][0].instance_id in ("b", "d")
    assert all(n.instance_id != key for key, hits in table.items() for n in hits)
    assert table["b"][0].instance_id == "d"
    assert table["b"][0].distance == 0.0


def test_index_round_trip(toy_index, tmp_path):
    path = tmp_path / "toy.gidx"
    toy_index.save(path)
    loaded = load_index(path)
    assert loaded.ids == toy_index.ids
    assert loaded.labels == toy_index.labels
    assert loaded.fingerprint == "fp"
    np.testing.assert_array_equal(loaded.features, toy_index.features)


def test_index_decode_errors(toy_index):
    blob = toy_index.to_bytes()
    with pytest.raises(BadMagicError):
        index_from_bytes(b"GLYF" + blob[4:])
    with pytest.raises(TruncatedDataError):
        index_from_bytes(blob[:-4])
    with pytest.raises(TruncatedDataError):
        index_from_bytes(blob[:20])


def test_build_feature_index(lvlv_setup):
    """Every instance is embedded with the model's fc1 width."""
    corpus, model = lvlv_setup
    index = build_feature_index(model, corpus)
    assert len(index) == len(corpus) == 34
    assert index.dimension == 16
    assert index.fingerprint == fingerprint(model)
    assert index.labels[0] == corpus.instances[0].lvlv
    assert index.features.min() >= 0


def test_image_query(lvlv_setup):
    """An indexed image finds itself at distance zero."""
    corpus, model = lvlv_setup
    index = build_feature_index(model, corpus)
    target = corpus.instances[5]
    hits = query_knn(index, target.image, k=3, model=model)
    assert hits[0].distance == pytest.approx(0.0, abs=1e-4)
    assert [h.distance for h in hits] == sorted(h.distance for h in hits)

    other = build_classifier(model.arch, np.random.default_rng(1), LVLV_LABELS)
    with pytest.raises(FingerprintMismatchError):
        query_knn(index, target.image, model=other)
    wider = build_classifier(
        ArchSpec(n_classes=17, conv_channels=(4, 4, 4), fc1_width=8),
        np.random.default_rng(0),
        LVLV_LABELS,
    )
    with pytest.raises(FingerprintMismatchError):
        query_knn(index, target.image, model=wider)


def test_build_index_rejects_other_notation(lvlv_setup):
    corpus, _ = lvlv_setup
    pitch = build_classifier(
        ArchSpec(n_classes=11, **SMALL), np.random.default_rng(0), PITCH_LABELS
    )
    with pytest.raises(VocabularyMismatchError):
        build_feature_index(pitch, corpus)
