"""Dense tensor layers with forward and backward passes.

Tensors are :class:`numpy.ndarray` objects in ``B x C x H x W`` layout for
images and ``B x N`` layout for feature vectors. Training and inference run
in float32; every operation keeps the dtype of its inputs, so passing float64
arrays gives the 64-bit mode used by :func:`grad_check`.

Forward functions are pure given their arguments. The only state they touch
is an explicit :class:`RunningStats` (batch normalization in train mode) and
an explicit :class:`numpy.random.Generator` (dropout in train mode). When a
:class:`Tape` is passed, the intermediates each backward pass needs (im2col
matrices, pooling argmax, dropout mask, batch statistics) are recorded on it.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .utils import NonFiniteError, ShapeError, TapeError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MODES = ("train", "eval")


@dataclass(frozen=True)
class LayerGradients:
    """Gradients of one recorded layer.

    Attributes
    ----------
    d_input : numpy.ndarray
        Gradient with respect to the layer input.
    d_params : tuple of numpy.ndarray
        Gradients with respect to the layer parameters, in parameter order.
    param_names : tuple of str
        Names the parameters were recorded under.
    """

    d_input: np.ndarray
    d_params: tuple = ()
    param_names: tuple = ()


@dataclass
class RunningStats:
    """Per-channel running mean and variance of a batch normalization layer.

    The arrays are updated in place in train mode, so a :class:`RunningStats`
    may wrap arrays owned by a parameter container.
    """

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "RunningStats":
        """Create statistics with mean 0 and variance 1."""
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def update(self, batch_mean, batch_var, momentum: float = BN_MOMENTUM):
        """Exponential moving average update, in place."""
        self.mean *= 1.0 - momentum
        self.mean += momentum * batch_mean.astype(self.mean.dtype)
        self.var *= 1.0 - momentum
        self.var += momentum * batch_var.astype(self.var.dtype)


@dataclass
class _Record:
    name: str
    backward: Callable
    ctx: tuple
    param_names: tuple


class Tape:
    """Ordered record of a forward pass, replayed once by :meth:`backward`."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def record(self, name: str, backward: Callable, ctx: tuple, param_names=()):
        """Append one layer to the tape.

        Parameters
        ----------
        name : str
            Layer name, used in diagnostics.
        backward : callable
            ``backward(ctx, d_output) -> (d_input, d_params)``.
        ctx : tuple
            Intermediates saved by the forward pass.
        param_names : sequence of str
            Names of the parameters ``d_params`` refers to.
        """
        if self._consumed:
            raise TapeError("Cannot record on a tape that was already replayed.")
        self._records.append(_Record(name, backward, ctx, tuple(param_names)))

    def backward(self, d_output: np.ndarray) -> list[LayerGradients]:
        """Back-propagate ``d_output`` through every recorded layer.

        Parameters
        ----------
        d_output : numpy.ndarray
            Gradient of the loss with respect to the last recorded output.

        Returns
        -------
        gradients : list of LayerGradients
            One entry per recorded layer, in forward order.
        """
        if self._consumed:
            raise TapeError(
                "Tape was already replayed; run the forward pass again before "
                "calling backward."
            )
        if not self._records:
            raise TapeError("Tape is empty.")
        self._consumed = True
        gradients = [None] * len(self._records)
        d = d_output
        for i in range(len(self._records) - 1, -1, -1):
            rec = self._records[i]
            d_input, d_params = rec.backward(rec.ctx, d)
            gradients[i] = LayerGradients(d_input, tuple(d_params), rec.param_names)
            d = d_input
        # intermediates are large; drop them once consumed
        self._records = []
        return gradients

    def named_gradients(self, d_output: np.ndarray):
        """Back-propagate and collect parameter gradients by name.

        Parameters
        ----------
        d_output : numpy.ndarray
            Gradient of the loss with respect to the last recorded output.

        Returns
        -------
        d_input : numpy.ndarray
            Gradient with respect to the input of the first recorded layer.
        grads : dict
            Parameter name to gradient array.
        """
        layers = self.backward(d_output)
        grads = {}
        for layer in layers:
            for name, grad in zip(layer.param_names, layer.d_params):
                grads[name] = grad
        return layers[0].d_input, grads


def _check_ndim(x: np.ndarray, ndim: int, what: str):
    if x.ndim != ndim:
        raise ShapeError(f"{what} must have {ndim} axes, got shape {x.shape}.")


def _check_mode(mode: str):
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}.")


def _names(name, *suffixes):
    return tuple(f"{name}.{s}" for s in suffixes) if name else ()


# -- convolution --------------------------------------------------------------


def conv2d_forward(x, kernels, bias, padding=1, tape=None, name=None):
    """Apply a stride-1 2-D convolution with zero padding.

    Parameters
    ----------
    x : numpy.ndarray
        Input of shape ``B x C x H x W``.
    kernels : numpy.ndarray
        Kernels of shape ``K x C x 3 x 3``.
    bias : numpy.ndarray
        Bias of shape ``K``.
    padding : int
        Zero padding on every side; 1 preserves the spatial extent.
    tape : Tape, optional
        Records the im2col matrix for the backward pass.
    name : str, optional
        Parameter name prefix used on the tape.

    Returns
    -------
    out : numpy.ndarray
        Output of shape ``B x K x H' x W'`` with ``H' = H + 2 * padding - 2``.
    """
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(kernels, 4, "conv2d kernels")
    n_out, n_in, kh, kw = kernels.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel axes 2 and 3 must be 3x3, got {kh}x{kw}.")
    if x.shape[1] != n_in:
        raise ShapeError(
            f"conv2d channel axis 1: input has {x.shape[1]} channels but the "
            f"kernels expect {n_in}."
        )
    if bias.shape != (n_out,):
        raise ShapeError(
            f"conv2d bias axis 0 must have extent {n_out}, got shape {bias.shape}."
        )
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    out = cols @ kernels.reshape(n_out, -1).T
    out += bias
    out = np.ascontiguousarray(out.reshape(b, ho, wo, n_out).transpose(0, 3, 1, 2))
    if tape is not None:
        tape.record(
            name or "conv2d",
            _conv2d_backward,
            (cols, kernels, x.shape, padding),
            _names(name, "weight", "bias"),
        )
    return out


def _conv2d_backward(ctx, d_out):
    cols, kernels, (b, c, h, w), padding = ctx
    n_out, _, kh, kw = kernels.shape
    ho, wo = d_out.shape[2], d_out.shape[3]
    d_mat = d_out.transpose(0, 2, 3, 1).reshape(-1, n_out)
    d_kernels = (d_mat.T @ cols).reshape(kernels.shape)
    d_bias = d_mat.sum(axis=0)
    d_cols = (d_mat @ kernels.reshape(n_out, -1)).reshape(b, ho, wo, c, kh, kw)
    d_xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=d_out.dtype)
    for i in range(kh):
        for j in range(kw):
            d_xp[:, :, i : i + ho, j : j + wo] += d_cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    d_x = d_xp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(d_x), (d_kernels, d_bias)


# -- pooling ------------------------------------------------------------------


def maxpool2d_forward(x, window=2, tape=None):
    """Max-pool disjoint ``window x window`` blocks.

    Parameters
    ----------
    x : numpy.ndarray
        Input of shape ``B x C x H x W`` with even ``H`` and ``W``.
    window : int
        Pooling window and stride.
    tape : Tape, optional
        Records the argmax positions.

    Returns
    -------
    out : numpy.ndarray
        Output of shape ``B x C x H/window x W/window``.
    """
    _check_ndim(x, 4, "maxpool2d input")
    b, c, h, w = x.shape
    for axis, extent in ((2, h), (3, w)):
        if extent % window:
            raise ShapeError(
                f"maxpool2d spatial axis {axis} has extent {extent}, which is not "
                f"divisible by the window {window}."
            )
    ho, wo = h // window, w // window
    blocks = (
        x.reshape(b, c, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, window * window)
    )
    # first maximum wins on ties
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    if tape is not None:
        tape.record("maxpool2d", _maxpool2d_backward, (argmax, x.shape, window))
    return out


def _maxpool2d_backward(ctx, d_out):
    argmax, (b, c, h, w), window = ctx
    ho, wo = h // window, w // window
    d_blocks = np.zeros((b, c, ho, wo, window * window), dtype=d_out.dtype)
    np.put_along_axis(d_blocks, argmax[..., None], d_out[..., None], axis=-1)
    d_x = (
        d_blocks.reshape(b, c, ho, wo, window, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h, w)
    )
    return d_x, ()


# -- batch normalization ------------------------------------------------------


def batchnorm2d_forward(
    x,
    scale,
    shift,
    running: Optional[RunningStats],
    mode="train",
    momentum=BN_MOMENTUM,
    eps=BN_EPS,
    tape=None,
    name=None,
):
    """Normalize each channel of ``x``.

    In train mode the batch mean and the biased batch variance normalize the
    input and ``running`` is updated in place with the unbiased variance. In
    eval mode only ``running`` is used.

    Parameters
    ----------
    x : numpy.ndarray
        Input of shape ``B x C x H x W``.
    scale, shift : numpy.ndarray
        Per-channel affine parameters of shape ``C``.
    running : RunningStats | None
        Running statistics; required in eval mode.
    mode : str
        ``"train"`` or ``"eval"``.
    momentum : float
        Weight of the current batch in the running average.
    eps : float
        Added to the variance before taking the square root.
    tape : Tape, optional
        Records the normalized input and inverse standard deviation.
    name : str, optional
        Parameter name prefix used on the tape.

    Returns
    -------
    out : numpy.ndarray
        Normalized input, same shape as ``x``.
    """
    _check_mode(mode)
    _check_ndim(x, 4, "batchnorm2d input")
    b, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"batchnorm2d channel axis 1 has extent {c} but scale/shift have "
            f"shapes {scale.shape}/{shift.shape}."
        )
    if mode == "train":
        n = b * h * w
        if n < 2:
            raise ShapeError(
                "batchnorm2d in train mode needs at least 2 values per channel "
                f"(axes 0, 2, 3 give {n})."
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if running is not None:
            running.update(mean, var * (n / (n - 1)), momentum)
    else:
        if running is None:
            raise UsageError(
                "batchnorm2d eval mode needs running statistics; initialize them "
                "with RunningStats.initial()."
            )
        mean = running.mean.astype(x.dtype)
        var = running.var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = scale[None, :, None, None] * x_hat + shift[None, :, None, None]
    if tape is not None:
        backward = (
            _batchnorm_train_backward if mode == "train" else _batchnorm_eval_backward
        )
        tape.record(
            name or "batchnorm2d",
            backward,
            (x_hat, inv_std, scale),
            _names(name, "weight", "bias"),
        )
    return out


def _batchnorm_train_backward(ctx, d_out):
    x_hat, inv_std, scale = ctx
    b, c, h, w = x_hat.shape
    n = b * h * w
    d_scale = np.sum(d_out * x_hat, axis=(0, 2, 3))
    d_shift = np.sum(d_out, axis=(0, 2, 3))
    d_hat = d_out * scale[None, :, None, None]
    sum_d_hat = d_hat.sum(axis=(0, 2, 3), keepdims=True)
    sum_d_hat_x = (d_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
    d_x = (inv_std[None, :, None, None] / n) * (
        n * d_hat - sum_d_hat - x_hat * sum_d_hat_x
    )
    return d_x, (d_scale, d_shift)


def _batchnorm_eval_backward(ctx, d_out):
    x_hat, inv_std, scale = ctx
    d_scale = np.sum(d_out * x_hat, axis=(0, 2, 3))
    d_shift = np.sum(d_out, axis=(0, 2, 3))
    d_x = d_out * (scale * inv_std)[None, :, None, None]
    return d_x, (d_scale, d_shift)


# -- activations --------------------------------------------------------------


def relu_forward(x, tape=None):
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    out = np.maximum(x, 0)
    if tape is not None:
        tape.record("relu", _relu_backward, (x > 0,))
    return out


def _relu_backward(ctx, d_out):
    (mask,) = ctx
    return d_out * mask, ()


def dropout_forward(x, p=0.5, mode="train", rng=None, tape=None):
    """Inverted dropout.

    Parameters
    ----------
    x : numpy.ndarray
        Input of any shape.
    p : float
        Probability of zeroing an element, ``0 <= p < 1``.
    mode : str
        ``"train"`` or ``"eval"``; eval mode returns ``x`` unchanged.
    rng : numpy.random.Generator
        Source of the mask in train mode.
    tape : Tape, optional
        Records the scaled mask.

    Returns
    -------
    out : numpy.ndarray
        ``x`` with dropped elements zeroed and survivors scaled by
        ``1 / (1 - p)``.
    """
    _check_mode(mode)
    if not 0 <= p < 1:
        raise UsageError(f"dropout probability must satisfy 0 <= p < 1, got {p}.")
    if mode == "eval" or p == 0:
        if tape is not None:
            tape.record("dropout", _identity_backward, ())
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs a random generator.")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = x * mask
    if tape is not None:
        tape.record("dropout", _dropout_backward, (mask,))
    return out


def _dropout_backward(ctx, d_out):
    (mask,) = ctx
    return d_out * mask, ()


def _identity_backward(ctx, d_out):
    return d_out, ()


# -- dense --------------------------------------------------------------------


def linear_forward(x, weights, bias, tape=None, name=None):
    """Affine map ``x @ weights.T + bias``.

    Parameters
    ----------
    x : numpy.ndarray
        Input of shape ``B x N``.
    weights : numpy.ndarray
        Weights of shape ``M x N``.
    bias : numpy.ndarray
        Bias of shape ``M``.
    tape : Tape, optional
        Records the input for the backward pass.
    name : str, optional
        Parameter name prefix used on the tape.

    Returns
    -------
    out : numpy.ndarray
        Output of shape ``B x M``.
    """
    _check_ndim(x, 2, "linear input")
    _check_ndim(weights, 2, "linear weights")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"linear axis 1: input has {x.shape[1]} features but the weights "
            f"expect {weights.shape[1]}."
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"linear bias axis 0 must have extent {weights.shape[0]}, "
            f"got shape {bias.shape}."
        )
    out = x @ weights.T
    out += bias
    if tape is not None:
        tape.record(
            name or "linear",
            _linear_backward,
            (x, weights),
            _names(name, "weight", "bias"),
        )
    return out


def _linear_backward(ctx, d_out):
    x, weights = ctx
    return d_out @ weights, (d_out.T @ x, d_out.sum(axis=0))


def flatten_forward(x, tape=None):
    """Collapse every axis but the first."""
    out = x.reshape(x.shape[0], -1)
    if tape is not None:
        tape.record("flatten", _flatten_backward, (x.shape,))
    return out


def _flatten_backward(ctx, d_out):
    (shape,) = ctx
    return d_out.reshape(shape), ()


# -- verification -------------------------------------------------------------


def grad_check(
    func: Callable,
    arrays: Sequence[np.ndarray],
    epsilon: float = 1e-4,
    seed: int = 0,
    abs_tol: float = 1e-8,
) -> float:
    """Compare analytic gradients with central finite differences.

    Parameters
    ----------
    func : callable
        ``func(*arrays) -> (output, grad_fn)`` where ``grad_fn(d_output)``
        returns one gradient per array. ``func`` is called once per perturbed
        element, so it must rebuild any state it mutates (running statistics,
        random generators) on every call.
    arrays : sequence of numpy.ndarray
        Inputs and parameters; they are copied to float64.
    epsilon : float
        Finite-difference step.
    seed : int
        Seed of the random projection that turns a tensor output into a scalar.
    abs_tol : float
        Elements whose analytic and numeric values differ by at most this much
        count as exact; it absorbs float64 round-off on vanishing gradients.

    Returns
    -------
    max_relative_error : float
        ``max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` over
        every element of every array.
    """
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    output, grad_fn = func(*arrays)
    output = np.asarray(output, dtype=np.float64)
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal(output.shape) if output.ndim else np.float64(1.0)
    analytic = grad_fn(np.asarray(projection, dtype=np.float64))
    if len(analytic) != len(arrays):
        raise ShapeError(
            f"grad_fn returned {len(analytic)} gradients for {len(arrays)} arrays."
        )

    def objective():
        value = np.sum(np.asarray(func(*arrays)[0], dtype=np.float64) * projection)
        if not np.isfinite(value):
            raise NonFiniteError("Objective is not finite during grad_check.")
        return value

    worst = 0.0
    for array, grad in zip(arrays, analytic):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != array.shape:
            raise ShapeError(
                f"Gradient shape {grad.shape} differs from value shape {array.shape}."
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("Analytic gradient contains non-finite values.")
        flat = array.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            plus = objective()
            flat[i] = original - epsilon
            minus = objective()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            diff = abs(flat_grad[i] - numeric)
            if diff <= abs_tol:
                continue
            worst = max(worst, diff / max(abs(flat_grad[i]), abs(numeric), 1e-8))
    return float(worst)
