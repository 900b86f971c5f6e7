"""Finite-difference verification of every layer, the loss and a toy model."""

import numpy as np

from .model import ArchSpec, ClassifierParams, build_classifier, forward
from .nn import (
    RunningStats,
    Tape,
    batchnorm2d_forward,
    conv2d_forward,
    dropout_forward,
    flatten_forward,
    grad_check,
    linear_forward,
    maxpool2d_forward,
    relu_forward,
)
from .train import focal_loss
from .utils import UsageError, logger

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
TOY_ARCH = ArchSpec(
    n_classes=3, input_side=8, conv_channels=(2, 2, 2), fc1_width=4, dropout_p=0.5
)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def _conv(x, k, b, tape):
    return conv2d_forward(x, k, b, 1, tape, "conv")


def _pool(x, tape):
    return maxpool2d_forward(x, 2, tape)


def _linear(x, w, b, tape):
    return linear_forward(x, w, b, tape, "fc")


def _layer(forward_fn, names=()):
    def func(x, *params):
        tape = Tape()
        out = forward_fn(x, *params, tape)

        def grad_fn(d):
            d_input, grads = tape.named_gradients(d)
            return [d_input, *(grads[n] for n in names)]

        return out, grad_fn

    return func


def _dropout(x):
    tape = Tape()
    out = dropout_forward(x, 0.5, "train", np.random.default_rng(1), tape)
    return out, lambda d: [tape.named_gradients(d)[0]]


def _batchnorm(x, scale, shift):
    tape = Tape()
    running = RunningStats.initial(x.shape[1], np.float64)
    out = batchnorm2d_forward(x, scale, shift, running, "train", tape=tape, name="bn")

    def grad_fn(d):
        d_input, grads = tape.named_gradients(d)
        return [d_input, grads["bn.weight"], grads["bn.bias"]]

    return out, grad_fn


def _focal(logits):
    targets = np.arange(logits.shape[0]) % logits.shape[1]
    loss, grad = focal_loss(logits, targets, gamma=1.0)
    return loss, lambda d: [d * grad]


def layer_cases(seed: int) -> dict:
    """Check functions and float64 inputs of every layer for one seed."""
    rng = np.random.default_rng(seed)
    return {
        "conv2d": (
            _layer(_conv, ("conv.weight", "conv.bias")),
            [
                rng.standard_normal((2, 2, 5, 5)),
                rng.standard_normal((3, 2, 3, 3)),
                rng.standard_normal(3),
            ],
        ),
        "maxpool2d": (
            _layer(_pool),
            # distinct values so no perturbation changes a window maximum
            [rng.permutation(64).reshape(2, 2, 4, 4) * 0.01],
        ),
        "batchnorm2d": (
            _batchnorm,
            [
                rng.standard_normal((4, 3, 3, 3)),
                rng.uniform(0.5, 1.5, 3),
                rng.standard_normal(3),
            ],
        ),
        "relu": (
            _layer(relu_forward),
            [_away_from_zero(rng, (3, 7))],
        ),
        "dropout": (_dropout, [rng.standard_normal((4, 6))]),
        "linear": (
            _layer(_linear, ("fc.weight", "fc.bias")),
            [
                rng.standard_normal((4, 5)),
                rng.standard_normal((3, 5)),
                rng.standard_normal(3),
            ],
        ),
        "flatten": (
            _layer(flatten_forward),
            [rng.standard_normal((2, 3, 2, 2))],
        ),
        "focal_loss": (_focal, [rng.standard_normal((6, 4)) * 2.0]),
    }


def model_gradient_error(seed: int = 0, epsilon: float = 1e-4) -> float:
    """Maximum relative gradient error of a toy classifier under focal loss.

    The classifier is the full layer stack scaled down to ``2 x 1 x 8 x 8``
    inputs, evaluated in train mode with a fixed dropout mask.
    """
    rng = np.random.default_rng(seed)
    params = build_classifier(TOY_ARCH, rng).copy(np.float64)
    names = TOY_ARCH.trainable_names()
    batch = rng.standard_normal((2, 1, 8, 8))
    targets = np.array([0, 2])

    def func(x, *values):
        tensors = dict(params.tensors)
        tensors.update(zip(names, values))
        for i in range(1, len(TOY_ARCH.conv_channels) + 1):
            tensors[f"bn{i}.running_mean"] = np.zeros(TOY_ARCH.conv_channels[i - 1])
            tensors[f"bn{i}.running_var"] = np.ones(TOY_ARCH.conv_channels[i - 1])
        toy = ClassifierParams(TOY_ARCH, params.vocabulary, tensors)
        tape = Tape()
        logits = forward(toy, x, "train", np.random.default_rng(0), tape)
        loss, grad = focal_loss(logits, targets)

        def grad_fn(d):
            d_input, grads = tape.named_gradients(d * grad)
            return [d_input, *(grads[n] for n in names)]

        return loss, grad_fn

    arrays = [batch, *(params.tensors[n] for n in names)]
    return grad_check(func, arrays, epsilon=epsilon, seed=seed)


def gradient_suite(seeds=range(10), epsilon: float = 1e-4) -> dict:
    """Run every check and collect the maximum relative errors.

    Parameters
    ----------
    seeds : iterable of int
        Seeds of the random layer inputs.
    epsilon : float
        Finite-difference step.

    Returns
    -------
    results : dict
        Check name to ``{"max_error", "tolerance", "passed"}``; the toy model
        is checked once per seed as ``"model"``.
    """
    errors = {}
    for seed in seeds:
        for name, (func, arrays) in layer_cases(seed).items():
            err = grad_check(func, arrays, epsilon=epsilon, seed=seed)
            errors.setdefault(name, []).append(err)
        errors.setdefault("model", []).append(model_gradient_error(seed, epsilon))
    if not errors:
        raise UsageError("The gradient suite needs at least one seed.")
    results = {}
    for name, values in errors.items():
        tolerance = MODEL_TOLERANCE if name == "model" else LAYER_TOLERANCE
        worst = max(values)
        results[name] = {
            "max_error": worst,
            "tolerance": tolerance,
            "passed": bool(worst < tolerance),
        }
        logger.info("Gradient check %-12s max relative error %.3e", name, worst)
    return results
