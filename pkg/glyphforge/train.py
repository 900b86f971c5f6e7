"""Focal-loss training of a classifier head.

Batches are drawn uniformly over classes, augmented with the train transform
and fed to Adam with L2 weight decay on every weight except biases and the
batch normalization layers. After each epoch the validation set is traversed
completely and the learning rate is halved when the validation loss
plateaus.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fnmatch import fnmatch
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from .data import (
    AugmentSpec,
    GlyphInstance,
    class_uniform_batches,
    eval_tensors,
    train_tensors,
    vocabulary,
)
from .model import (
    ArchSpec,
    ClassifierParams,
    FactoredClassifier,
    backward,
    build_classifier,
    forward,
    predict_logits,
)
from .nn import Tape
from .utils import (
    DataError,
    DivergenceError,
    NonFiniteError,
    UsageError,
    VocabularyMismatchError,
    logger,
)

_NOTATION_DEFAULTS = {
    "suzipu": {"epochs": 80, "batches_per_epoch": 43, "lr": 1e-3},
    "lvlvpu": {"epochs": 50, "batches_per_epoch": 21, "lr": 5e-4},
}


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for the stream identified by ``keys``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def default_arch(key: str) -> ArchSpec:
    """Default architecture of the head trained on ``key``."""
    return ArchSpec(n_classes=len(vocabulary(key)))


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    Parameters
    ----------
    epochs : int
        Number of epochs.
    batches_per_epoch : int
        Class-uniform batches drawn per epoch.
    batch_size : int
        Instances per batch.
    lr : float
        Initial Adam learning rate.
    weight_decay : float
        L2 coefficient added to the gradient of decayed parameters.
    decay_exclusions : tuple of str
        Glob patterns of parameter names exempt from weight decay.
    focal_gamma : float
        Focusing parameter of the focal loss.
    plateau_patience : int
        Non-improving epochs tolerated before the learning rate drops.
    plateau_factor : float
        Learning rate multiplier on a plateau.
    min_lr : float
        Floor of the learning rate.
    seed : int
        Seed of initialization, sampling, augmentation and dropout.
    augment : AugmentSpec
        Train and eval transform parameters.
    """

    epochs: int = 80
    batches_per_epoch: int = 43
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-4
    decay_exclusions: tuple = ("*.bias", "bn*")
    focal_gamma: float = 1.0
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        object.__setattr__(self, "decay_exclusions", tuple(self.decay_exclusions))
        for name in ("epochs", "batches_per_epoch", "batch_size", "plateau_patience"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}.")
        if self.lr <= 0 or self.min_lr <= 0:
            raise UsageError(
                f"Learning rates must be > 0, got lr={self.lr}, min_lr={self.min_lr}."
            )
        if self.weight_decay < 0 or self.focal_gamma < 0:
            raise UsageError("weight_decay and focal_gamma must be >= 0.")
        if not 0 < self.plateau_factor < 1:
            raise UsageError(
                f"plateau_factor must be in (0, 1), got {self.plateau_factor}."
            )

    @classmethod
    def for_notation(
        cls, notation: str, artificial: bool = False, **overrides
    ) -> "TrainConfig":
        """Defaults of a notation, with ``None`` overrides ignored.

        Suzipu trains 80 epochs of 43 batches at lr 1e-3; lülüpu 50 epochs of
        21 batches at lr 5e-4, or 22 batches when artificial samples enlarge
        the pool.
        """
        if notation not in _NOTATION_DEFAULTS:
            raise UsageError(f"Unknown notation {notation!r}.")
        values = dict(_NOTATION_DEFAULTS[notation])
        if artificial and notation == "lvlvpu":
            values["batches_per_epoch"] = 22
        values["augment"] = AugmentSpec.for_notation(notation)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> dict:
        """Return a JSON-compatible dict."""
        d = asdict(self)
        d["decay_exclusions"] = list(self.decay_exclusions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from :meth:`to_dict` output."""
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"Unknown TrainConfig fields: {sorted(unknown)}.")
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentSpec(**d["augment"])
        return cls(**d)

    def to_json(self, path):
        """Write the config as JSON."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        """Read a config written by :meth:`to_json`."""
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, ValueError) as err:
            raise DataError(f"Cannot read training config {path}: {err}") from err
        if not isinstance(payload, dict):
            raise DataError(f"Training config {path} must hold a JSON object.")
        return cls.from_dict(payload)


def focal_loss(logits: np.ndarray, targets, gamma: float = 1.0):
    """Mean focal loss over a batch and its gradient.

    Parameters
    ----------
    logits : numpy.ndarray
        ``B x K`` scores.
    targets : array-like of int
        True class index of each row.
    gamma : float
        Focusing parameter; 0 gives cross-entropy.

    Returns
    -------
    loss : float
        ``mean(-(1 - p_t)**gamma * log(p_t))``.
    grad : numpy.ndarray
        Gradient of ``loss`` with respect to ``logits``, in their dtype.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise UsageError(
            f"Expected B x K logits and B targets, got {logits.shape} and "
            f"{targets.shape}."
        )
    n, k = logits.shape
    if n == 0:
        raise UsageError("focal_loss needs a non-empty batch.")
    if np.any(targets < 0) or np.any(targets >= k):
        raise UsageError(f"Targets must lie in [0, {k}).")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("focal_loss received non-finite logits.")

    logp = log_softmax(logits.astype(np.float64), axis=1)
    rows = np.arange(n)
    logq = logp[rows, targets]
    q = np.exp(logq)
    one_minus = -np.expm1(logq)
    modulator = one_minus**gamma
    loss = float(np.mean(-modulator * logq))

    if gamma == 0:
        d_q_term = np.zeros_like(q)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d_q_term = np.where(
                one_minus > 0, gamma * one_minus ** (gamma - 1) * q * logq, 0.0
            )
    coef = (d_q_term - modulator) / n
    delta = -np.exp(logp)
    delta[rows, targets] += 1.0
    grad = coef[:, None] * delta
    return loss, grad.astype(logits.dtype)


@dataclass
class AdamState:
    """Moments and step counter of Adam."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, tensors: dict, names: Sequence[str], **kwargs) -> "AdamState":
        """Zero moments shaped like ``tensors[name]`` for each name."""
        m = {n: np.zeros_like(tensors[n]) for n in names}
        v = {n: np.zeros_like(tensors[n]) for n in names}
        return cls(m, v, **kwargs)


def is_decayed(name: str, exclusions: Sequence[str]) -> bool:
    """Whether weight decay applies to the parameter ``name``."""
    return not any(fnmatch(name, pattern) for pattern in exclusions)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    exclusions: Sequence[str] = (),
):
    """One Adam update with coupled L2 weight decay, in place.

    Parameters
    ----------
    params : dict
        Parameter name to array; updated in place.
    grads : dict
        Gradient of every name in ``state.m``.
    state : AdamState
        Moments, updated in place.
    lr : float
        Learning rate.
    weight_decay : float
        L2 coefficient added to the gradient of non-excluded parameters.
    exclusions : sequence of str
        Glob patterns of parameter names without weight decay.

    Returns
    -------
    params : dict
    state : AdamState
    """
    if lr <= 0:
        raise UsageError(f"Learning rate must be > 0, got {lr}.")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name in state.m:
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise UsageError(f"Gradient of {name} has shape {g.shape}, not {p.shape}.")
        if weight_decay and is_decayed(name, exclusions):
            g = g + weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p -= update.astype(p.dtype, copy=False)
    return params, state


@dataclass
class PlateauScheduler:
    """Halve the learning rate when the monitored loss stops improving.

    An epoch improves when its loss is below ``best - threshold``. After more
    than ``patience`` consecutive epochs without improvement the learning rate
    is multiplied by ``factor``, never going below ``min_lr``, and the counter
    restarts.
    """

    lr: float
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    threshold: float = 1e-8
    best: float = math.inf
    counter: int = 0

    def step(self, loss: float) -> float:
        """Record one epoch's loss and return the learning rate to use next."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.counter = 0
        return self.lr


def plateau_update(state: PlateauScheduler, val_loss: float) -> float:
    """Advance ``state`` by one epoch; returns the new learning rate."""
    return state.step(val_loss)


@dataclass
class TrainHistory:
    """Per-epoch training record."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def append(self, train_loss, val_loss, val_acc, lr):
        """Add one epoch."""
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.val_acc.append(float(val_acc))
        self.lr.append(float(lr))

    def to_csv(self, path):
        """Write ``epoch,train_loss,val_loss,val_acc,lr`` rows."""
        with open(path, "w", newline="") as fid:
            writer = csv.writer(fid)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
            for i in range(len(self)):
                writer.writerow(
                    [
                        i + 1,
                        repr(self.train_loss[i]),
                        repr(self.val_loss[i]),
                        repr(self.val_acc[i]),
                        repr(self.lr[i]),
                    ]
                )


def _targets(instances, key, index) -> np.ndarray:
    try:
        return np.array([index[inst.label(key)] for inst in instances], dtype=np.int64)
    except KeyError as err:
        raise VocabularyMismatchError(
            f"Label {err.args[0]!r} is not in the classifier vocabulary."
        ) from err


def validation_pass(params: ClassifierParams, tensors, targets, gamma):
    """Focal loss and accuracy (%) of a complete eval-mode pass."""
    logits = predict_logits(params, tensors)
    loss, _ = focal_loss(logits, targets, gamma)
    acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == targets))
    return loss, acc


def train_model(
    arch: ArchSpec,
    train_set: Sequence[GlyphInstance],
    val_set: Sequence[GlyphInstance],
    config: TrainConfig,
    key: str,
    vocab: Optional[Sequence[str]] = None,
    zero_head: bool = False,
):
    """Train one classifier head.

    Parameters
    ----------
    arch : ArchSpec
        Architecture; ``n_classes`` must match the vocabulary of ``key``.
    train_set : sequence of GlyphInstance
        Training pool, sampled class-uniformly with replacement.
    val_set : sequence of GlyphInstance
        Validation instances; when empty the train loss drives the schedule.
    config : TrainConfig
        Hyperparameters and seed.
    key : str
        ``"pitch"``, ``"secondary"`` or ``"lvlv"``.
    vocab : sequence of str, optional
        Output labels; defaults to the full vocabulary of ``key``.
    zero_head : bool
        Start with a zero output layer.

    Returns
    -------
    params : ClassifierParams
        Trained head.
    history : TrainHistory
        One entry per epoch.
    """
    vocab = tuple(vocab or vocabulary(key))
    if len(vocab) != arch.n_classes:
        raise VocabularyMismatchError(
            f"{key} vocabulary has {len(vocab)} labels, architecture {arch.n_classes}."
        )
    if not train_set:
        raise UsageError("Cannot train on an empty training set.")
    init_ss, batch_ss, aug_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(4)
    params = build_classifier(arch, np.random.default_rng(init_ss), vocab, zero_head)
    index = params.label_index()
    batch_rng = np.random.default_rng(batch_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)

    val_x = eval_tensors(list(val_set), config.augment)
    val_y = _targets(val_set, key, index)
    _targets(train_set, key, index)

    trainable = arch.trainable_names()
    state = AdamState.zeros(params.tensors, trainable)
    scheduler = PlateauScheduler(
        config.lr, config.plateau_patience, config.plateau_factor, config.min_lr
    )
    history = TrainHistory()
    for epoch in range(config.epochs):
        lr = scheduler.lr
        losses = []
        batches = class_uniform_batches(
            train_set, config.batch_size, config.batches_per_epoch, key, batch_rng
        )
        for b, batch in enumerate(batches):
            x = train_tensors(batch, config.augment, aug_rng)
            y = np.array([index[inst.label(key)] for inst in batch], dtype=np.int64)
            tape = Tape()
            logits = forward(params, x, "train", drop_rng, tape)
            try:
                loss, d_logits = focal_loss(logits, y, config.focal_gamma)
            except NonFiniteError as err:
                raise DivergenceError(
                    f"Training diverged at epoch {epoch + 1}, batch {b + 1}: {err}"
                ) from err
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"Training diverged at epoch {epoch + 1}, batch {b + 1}: "
                    f"loss is {loss}."
                )
            grads = backward(tape, d_logits)
            adam_step(
                params.tensors,
                grads,
                state,
                lr,
                config.weight_decay,
                config.decay_exclusions,
            )
            losses.append(loss)
            logger.debug("epoch %d batch %d loss %.5f", epoch + 1, b + 1, loss)
        train_loss = float(np.mean(losses))
        if len(val_y):
            val_loss, val_acc = validation_pass(
                params, val_x, val_y, config.focal_gamma
            )
            if not math.isfinite(val_loss):
                raise DivergenceError(
                    f"Validation loss is {val_loss} after epoch {epoch + 1}."
                )
            scheduler.step(val_loss)
        else:
            val_loss, val_acc = math.nan, math.nan
            scheduler.step(train_loss)
        history.append(train_loss, val_loss, val_acc, lr)
        logger.info(
            "%s epoch %d/%d: train loss %.4f, val loss %.4f, val acc %.2f%%, lr %.2e",
            key,
            epoch + 1,
            config.epochs,
            train_loss,
            val_loss,
            val_acc,
            lr,
        )
    return params, history


def train_factored(
    train_set: Sequence[GlyphInstance],
    val_set: Sequence[GlyphInstance],
    config: TrainConfig,
    archs: Optional[dict] = None,
):
    """Train the pitch and secondary heads of a suzipu classifier.

    The heads use seeds derived from ``config.seed``.

    Returns
    -------
    classifier : FactoredClassifier
    histories : dict
        ``{"pitch": TrainHistory, "secondary": TrainHistory}``.
    """
    archs = archs or {}
    heads, histories = {}, {}
    for i, key in enumerate(("pitch", "secondary")):
        head_config = replace(config, seed=derive_seed(config.seed, i))
        heads[key], histories[key] = train_model(
            archs.get(key, default_arch(key)), train_set, val_set, head_config, key
        )
    return FactoredClassifier(heads["pitch"], heads["secondary"]), histories
