import math
from collections import Counter

import numpy as np
import pytest

from ..data import AugmentSpec, eval_tensors, gen_synthetic_corpus, stratified_split
from ..metrics import decile_macro_f1, evaluate
from ..model import ArchSpec, predict_logits
from ..profiles import ImbalanceProfile
from ..train import (
    AdamState,
    PlateauScheduler,
    TrainConfig,
    TrainHistory,
    adam_step,
    default_arch,
    derive_seed,
    focal_loss,
    is_decayed,
    train_factored,
    train_model,
)
from ..utils import NonFiniteError, UsageError, VocabularyMismatchError

TINY_ARCH = ArchSpec(n_classes=17, conv_channels=(2, 2, 2), fc1_width=8)


@pytest.fixture(scope="module")
def tiny_lvlv():
    corpus = gen_synthetic_corpus("lvlvpu", 2, n_editions=2, seed=0)
    return stratified_split(corpus.instances, 0.5, seed=0)


def _tiny_config(**overrides):
    values = dict(epochs=2, batches_per_epoch=2, batch_size=6, seed=3)
    values.update(overrides)
    return TrainConfig(**values)


def test_focal_loss_values():
    """Two equal logits give 0.5 ln 2; gamma 0 is cross-entropy."""
    loss, _ = focal_loss(np.zeros((1, 2)), [0], gamma=1.0)
    assert math.isclose(loss, 0.5 * math.log(2), rel_tol=1e-12)
    logits = np.random.default_rng(0).standard_normal((5, 4))
    targets = np.array([0, 1, 2, 3, 0])
    ce, _ = focal_loss(logits, targets, gamma=0.0)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert math.isclose(ce, -logp[np.arange(5), targets].mean(), rel_tol=1e-10)


def test_focal_loss_properties():
    """Row order does not matter; confident hits cost less."""
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((6, 3))
    targets = rng.integers(0, 3, 6)
    perm = rng.permutation(6)
    a, _ = focal_loss(logits, targets)
    b, _ = focal_loss(logits[perm], targets[perm])
    assert math.isclose(a, b, rel_tol=1e-12)
    confident, _ = focal_loss(np.array([[8.0, 0.0]]), [0])
    unsure, _ = focal_loss(np.array([[0.5, 0.0]]), [0])
    assert confident < unsure
    _, grad = focal_loss(np.array([[60.0, 0.0, 0.0]]), [0], gamma=2.0)
    assert np.all(np.isfinite(grad))


def test_focal_loss_errors():
    with pytest.raises(UsageError):
        focal_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(UsageError):
        focal_loss(np.zeros((0, 3)), [])
    with pytest.raises(NonFiniteError):
        focal_loss(np.array([[np.nan, 0.0]]), [0])


def test_adam_first_step_is_lr():
    """The bias-corrected first step moves each weight by about lr."""
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 1e-3])}
    state = AdamState.zeros(params, ["w"])
    adam_step(params, grads, state, lr=0.01)
    np.testing.assert_allclose(params["w"], [0.99, -1.99, 2.99], rtol=1e-5)
    assert state.step == 1


def test_adam_zero_gradient_and_decay_exclusions():
    """Zero gradients leave weights alone unless weight decay applies."""
    params = {name: np.ones(2) for name in ("fc.weight", "fc.bias", "bn1.weight")}
    grads = {name: np.zeros(2) for name in params}
    state = AdamState.zeros(params, list(params))
    adam_step(params, grads, state, 0.1, 0.5, ("*.bias", "bn*"))
    assert params["fc.weight"][0] < 1.0
    np.testing.assert_array_equal(params["fc.bias"], 1.0)
    np.testing.assert_array_equal(params["bn1.weight"], 1.0)
    assert not is_decayed("conv2.bias", ("*.bias", "bn*"))
    assert is_decayed("conv2.weight", ("*.bias", "bn*"))


def test_plateau_scheduler():
    """The rate halves after the sixth flat epoch and stops at the floor."""
    scheduler = PlateauScheduler(lr=1e-3)
    assert scheduler.step(1.0) == 1e-3
    rates = [scheduler.step(1.0) for _ in range(6)]
    assert rates[:5] == [1e-3] * 5
    assert rates[5] == 5e-4
    assert scheduler.step(0.5) == 5e-4
    floor = PlateauScheduler(lr=1.5e-6, patience=0)
    floor.step(1.0)
    assert floor.step(1.0) == 1e-6
    assert floor.step(1.0) == 1e-6


def test_train_config():
    """Notation defaults, overrides and validation."""
    suzipu = TrainConfig.for_notation("suzipu")
    assert (suzipu.epochs, suzipu.batches_per_epoch, suzipu.lr) == (80, 43, 1e-3)
    lvlv = TrainConfig.for_notation("lvlvpu", epochs=None, seed=7)
    assert (lvlv.epochs, lvlv.batches_per_epoch, lvlv.lr, lvlv.seed) == (
        50,
        21,
        5e-4,
        7,
    )
    assert lvlv.augment == AugmentSpec.for_notation("lvlvpu")
    assert TrainConfig.for_notation("lvlvpu", artificial=True).batches_per_epoch == 22
    assert TrainConfig.from_dict(lvlv.to_dict()) == lvlv
    with pytest.raises(UsageError):
        TrainConfig(epochs=0)
    with pytest.raises(UsageError):
        TrainConfig.from_dict({"epoch": 3})


def test_derive_seed():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(1, 3)
    assert 0 <= derive_seed(0) < 2**32


def test_train_model_is_deterministic(tiny_lvlv, tmp_path):
    """The same seed reproduces weights and history bit-exactly."""
    train, val = tiny_lvlv
    config = _tiny_config()
    a, hist_a = train_model(TINY_ARCH, train, val, config, "lvlv")
    b, hist_b = train_model(TINY_ARCH, train, val, config, "lvlv")
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
    assert hist_a.val_loss == hist_b.val_loss
    assert len(hist_a) == 2
    assert hist_a.lr == [config.lr, config.lr]
    hist_a.to_csv(tmp_path / "history.csv")
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc,lr"
    assert len(lines) == 3


def test_zero_head_starts_at_uniform_loss(tiny_lvlv):
    """A zeroed head predicts uniformly: the first loss is (1 - 1/K) ln K."""
    train, val = tiny_lvlv
    k = TINY_ARCH.n_classes
    expected = (1 - 1 / k) * math.log(k)
    config = _tiny_config(epochs=1, batches_per_epoch=1)
    _, history = train_model(TINY_ARCH, train, val, config, "lvlv", zero_head=True)
    assert history.train_loss[0] == pytest.approx(expected, rel=1e-6)
    assert history.val_loss[0] == pytest.approx(expected, rel=0.05)


@pytest.mark.slow
def test_smoothed_training_loss_decreases():
    """The five-epoch running mean of the training loss goes down."""
    corpus = gen_synthetic_corpus("lvlvpu", 6, n_editions=3, seed=4)
    arch = ArchSpec(n_classes=17, conv_channels=(8, 8, 16), fc1_width=32)
    config = TrainConfig(epochs=15, batches_per_epoch=6, batch_size=34, seed=4)
    _, history = train_model(arch, corpus.instances, [], config, "lvlv", zero_head=True)
    smoothed = np.convolve(history.train_loss, np.ones(5) / 5, mode="valid")
    assert len(smoothed) == 11
    assert smoothed[-1] < smoothed[0]
    assert np.all(np.diff(smoothed[::5]) < 0)


def test_train_model_without_validation(tiny_lvlv):
    """An empty validation set yields nan metrics."""
    train, _ = tiny_lvlv
    _, history = train_model(TINY_ARCH, train, [], _tiny_config(epochs=1), "lvlv")
    assert math.isnan(history.val_loss[0])
    assert math.isfinite(history.train_loss[0])


def test_train_model_errors(tiny_lvlv):
    train, val = tiny_lvlv
    with pytest.raises(VocabularyMismatchError):
        train_model(ArchSpec(n_classes=5), train, val, _tiny_config(), "lvlv")
    with pytest.raises(UsageError):
        train_model(TINY_ARCH, [], val, _tiny_config(), "lvlv")
    subset = ("Dalu", "Wuyi")
    with pytest.raises(VocabularyMismatchError):
        train_model(
            ArchSpec(n_classes=2, conv_channels=(2, 2, 2), fc1_width=8),
            train,
            val,
            _tiny_config(),
            "lvlv",
            vocab=subset,
        )


def test_train_factored():
    """Both suzipu heads are trained with their own vocabularies."""
    corpus = gen_synthetic_corpus("suzipu", 1, n_editions=1, seed=0)
    archs = {
        "pitch": ArchSpec(n_classes=11, conv_channels=(2, 2, 2), fc1_width=8),
        "secondary": ArchSpec(n_classes=7, conv_channels=(2, 2, 2), fc1_width=8),
    }
    config = _tiny_config(epochs=1, batches_per_epoch=1)
    fc, histories = train_factored(corpus.instances, [], config, archs)
    assert len(fc.joint_vocabulary) == 77
    assert set(histories) == {"pitch", "secondary"}
    assert isinstance(histories["pitch"], TrainHistory)


@pytest.mark.slow
def test_training_fits_three_classes():
    """A small head learns three well separated synthetic classes."""
    corpus = gen_synthetic_corpus("lvlvpu", 12, n_editions=3, seed=0)
    subset = ("Dalu", "Wuyi", "Zhezi")
    pool = [inst for inst in corpus if inst.lvlv in subset]
    arch = ArchSpec(n_classes=3, conv_channels=(8, 8, 16), fc1_width=32)
    config = TrainConfig(epochs=15, batches_per_epoch=6, batch_size=24, seed=1)
    params, history = train_model(arch, pool, pool, config, "lvlv", vocab=subset)
    assert history.train_loss[-1] < history.train_loss[0]
    logits = predict_logits(params, eval_tensors(pool, config.augment))
    targets = np.array([subset.index(inst.lvlv) for inst in pool])
    assert np.mean(np.argmax(logits, axis=1) == targets) > 0.8


@pytest.mark.slow
def test_factored_training_fits_suzipu():
    """Both heads together memorize 20 instances of each of the 77 classes."""
    corpus = gen_synthetic_corpus("suzipu", 20, seed=0)
    config = TrainConfig.for_notation("suzipu", epochs=30, seed=0)
    model, _ = train_factored(corpus.instances, [], config)
    report = evaluate(model, corpus.instances, config.augment)
    assert report.joint_accuracy >= 99.0


@pytest.mark.slow
def test_rare_classes_keep_up():
    """Class-uniform batches and focal loss keep rare-class F1 near common F1."""
    imbalance = ImbalanceProfile("geometric", 0.85)
    corpus = gen_synthetic_corpus("lvlvpu", 60, seed=2, imbalance=imbalance)
    train, val = stratified_split(corpus.instances, 0.75, seed=2)
    config = TrainConfig.for_notation("lvlvpu", epochs=20, batches_per_epoch=10, seed=2)
    params, _ = train_model(default_arch("lvlv"), train, val, config, "lvlv")
    report = evaluate(params, val, config.augment)
    train_counts = Counter(inst.lvlv for inst in train)
    rare, common = decile_macro_f1(report.per_class["lvlv"], train_counts)
    assert abs(rare - common) <= 0.15
