import numpy as np
import pytest

from ..data import PITCH_LABELS, SECONDARY_LABELS
from ..model import (
    MAGIC,
    ArchSpec,
    FactoredClassifier,
    build_classifier,
    count_parameters,
    deserialize,
    extract_fc1,
    fingerprint,
    forward,
    load_classifier,
    predict_joint,
    predict_logits,
    save_classifier,
    serialize,
)
from ..utils import (
    BadMagicError,
    DataError,
    ModelFormatError,
    ShapeError,
    ShapeMismatchError,
    TruncatedDataError,
    UnsupportedVersionError,
    UsageError,
)

SMALL = ArchSpec(n_classes=5, input_side=16, conv_channels=(4, 4, 8), fc1_width=12)


def _batch(n, side=48, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, 1, side, side)).astype(np.float32)


def test_arch_validation():
    """Extents must be positive and the input divisible by the pools."""
    assert ArchSpec(n_classes=11).flatten_width == 2304
    with pytest.raises(UsageError):
        ArchSpec(n_classes=0)
    with pytest.raises(UsageError):
        ArchSpec(n_classes=3, input_side=44)
    with pytest.raises(UsageError):
        ArchSpec(n_classes=3, dropout_p=1.0)
    arch = ArchSpec(n_classes=7)
    assert ArchSpec.from_dict(arch.to_dict()) == arch


@pytest.mark.parametrize(
    "n_classes, expected", [(11, 319979), (7, 319463), (17, 320753)]
)
def test_count_parameters(n_classes, expected):
    """The closed form matches the stored trainable tensors."""
    arch = ArchSpec(n_classes=n_classes)
    assert count_parameters(arch) == expected
    params = build_classifier(arch, np.random.default_rng(0))
    total = sum(params.tensors[n].size for n in arch.trainable_names())
    assert total == expected


def test_build_classifier():
    """Initialization is deterministic and follows the documented layout."""
    arch = ArchSpec(n_classes=11)
    a = build_classifier(arch, np.random.default_rng(3))
    b = build_classifier(arch, np.random.default_rng(3))
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
    assert a.tensors["fc2.weight"].shape == (11, 128)
    np.testing.assert_array_equal(a.tensors["conv1.bias"], 0)
    np.testing.assert_array_equal(a.tensors["bn2.weight"], 1)
    np.testing.assert_array_equal(a.tensors["bn2.running_var"], 1)
    bound = np.sqrt(6.0 / 9)
    assert np.abs(a.tensors["conv1.weight"]).max() <= bound
    with pytest.raises(UsageError):
        build_classifier(arch, np.random.default_rng(0), vocabulary=["a"])


def test_forward_shapes_and_determinism():
    """Eval logits have the class width and repeat bit-exactly."""
    params = build_classifier(ArchSpec(n_classes=17), np.random.default_rng(0))
    batch = _batch(4)
    logits = forward(params, batch)
    assert logits.shape == (4, 17)
    np.testing.assert_array_equal(logits, forward(params, batch))
    with pytest.raises(ShapeError):
        forward(params, _batch(2, side=40))


def test_forward_train_mode_updates_running_stats():
    """Train mode needs a generator and moves the running mean."""
    params = build_classifier(SMALL, np.random.default_rng(0))
    before = params.tensors["bn1.running_mean"].copy()
    with pytest.raises(UsageError):
        forward(params, _batch(3, 16), mode="train")
    forward(params, _batch(3, 16), mode="train", rng=np.random.default_rng(1))
    assert not np.array_equal(before, params.tensors["bn1.running_mean"])


def test_zero_head_gives_uniform_softmax():
    """A zero output layer makes every logit of a row equal."""
    params = build_classifier(SMALL, np.random.default_rng(0), zero_head=True)
    logits = forward(params, _batch(3, 16))
    np.testing.assert_array_equal(logits, logits[:, :1].repeat(5, axis=1))


def test_extract_fc1():
    """Features are fc1_width wide, non-negative and input-determined."""
    params = build_classifier(ArchSpec(n_classes=7), np.random.default_rng(0))
    batch = np.concatenate([_batch(1, seed=4)] * 2)
    feats = extract_fc1(params, batch)
    assert feats.shape == (2, 128)
    assert feats.min() >= 0
    np.testing.assert_array_equal(feats[0], feats[1])


def test_predict_logits_matches_forward():
    """Chunked prediction equals a single forward pass."""
    params = build_classifier(SMALL, np.random.default_rng(2))
    batch = _batch(7, 16)
    np.testing.assert_allclose(
        predict_logits(params, batch, batch_size=3), forward(params, batch), rtol=1e-6
    )


def _confident_head(labels, seed):
    arch = ArchSpec(n_classes=len(labels), input_side=16, conv_channels=(2, 2, 2))
    params = build_classifier(arch, np.random.default_rng(seed), labels, zero_head=True)
    params.tensors["fc2.bias"][0] = 10.0
    return params


def test_predict_joint():
    """Heads with a +10 margin on class 0 predict it with high confidence."""
    fc = FactoredClassifier(
        _confident_head(PITCH_LABELS, 0), _confident_head(SECONDARY_LABELS, 1)
    )
    assert len(fc.joint_vocabulary) == 77
    predictions = predict_joint(fc, _batch(2, 16))
    for p in predictions:
        assert (p.pitch, p.secondary) == (PITCH_LABELS[0], SECONDARY_LABELS[0])
        assert p.pitch_conf > 0.99
        assert p.secondary_conf > 0.99
    softer = predict_joint(fc, _batch(2, 16), temperatures=(5.0, 5.0))
    assert softer[0].pitch == PITCH_LABELS[0]
    assert softer[0].pitch_conf < predictions[0].pitch_conf
    with pytest.raises(UsageError):
        predict_joint(fc, _batch(1, 16), temperatures=(0.0, 1.0))


def test_serialization_round_trip(tmp_path):
    """Saved heads reproduce the logits and the fingerprint."""
    params = build_classifier(SMALL, np.random.default_rng(5), list("abcde"))
    path = tmp_path / "head.glyf"
    save_classifier(path, params)
    loaded = load_classifier(path)
    assert loaded.vocabulary == params.vocabulary
    batch = _batch(2, 16)
    np.testing.assert_array_equal(forward(loaded, batch), forward(params, batch))
    assert fingerprint(loaded) == fingerprint(params)
    assert serialize(loaded) == serialize(params)


def test_factored_save_load(tmp_path):
    """Both heads are written and read from one directory."""
    fc = FactoredClassifier(
        _confident_head(PITCH_LABELS, 0), _confident_head(SECONDARY_LABELS, 1)
    )
    paths = fc.save(tmp_path)
    assert [p.name for p in paths] == ["pitch.glyf", "secondary.glyf"]
    loaded = FactoredClassifier.load(tmp_path)
    assert loaded.joint_vocabulary == fc.joint_vocabulary


def test_deserialize_errors():
    """Corrupted blobs raise distinct error categories."""
    blob = serialize(build_classifier(SMALL, np.random.default_rng(0)))
    with pytest.raises(BadMagicError, match="bad magic"):
        deserialize(b"XXXX" + blob[4:])
    wrong_version = MAGIC + np.array([99], dtype="<u4").tobytes() + blob[8:]
    with pytest.raises(UnsupportedVersionError):
        deserialize(wrong_version)
    with pytest.raises(TruncatedDataError, match="truncated tensor data"):
        deserialize(blob[:-10])


def test_deserialize_shape_mismatch():
    """A header whose tensors disagree with its architecture is rejected."""
    blob = serialize(build_classifier(SMALL, np.random.default_rng(0)))
    header_len = int(np.frombuffer(blob, "<u4", 1, 8)[0])
    header = blob[12 : 12 + header_len].replace(
        b'"fc1_width": 12', b'"fc1_width": 13'
    )
    patched = (
        blob[:8] + np.array([len(header)], dtype="<u4").tobytes() + header
        + blob[12 + header_len :]
    )
    with pytest.raises(ShapeMismatchError):
        deserialize(patched)


def test_full_size_truncation():
    """A 2304 x 128 fc1 declared in the header but missing data is truncated."""
    blob = serialize(build_classifier(ArchSpec(n_classes=11), np.random.default_rng(0)))
    with pytest.raises(TruncatedDataError):
        deserialize(blob[: len(blob) // 2])


def test_deserialize_short_and_malformed_headers(tmp_path):
    """A cut preamble is truncation; a tensor entry without sizes is corrupt."""
    blob = serialize(build_classifier(SMALL, np.random.default_rng(0)))
    with pytest.raises(TruncatedDataError, match="preamble"):
        deserialize(blob[:6])
    with pytest.raises(BadMagicError):
        deserialize(b"")
    with pytest.raises(ModelFormatError, match="Corrupt model header"):
        deserialize(blob.replace(b'"nbytes"', b'"nbytez"'))
    with pytest.raises(DataError):
        load_classifier(tmp_path / "absent.glyf")
