"""Compact CNN glyph classifier.

Three blocks of ``conv3x3 (pad 1) -> ReLU -> batchnorm -> maxpool 2x2`` are
followed by ``flatten -> fc1 -> ReLU -> dropout -> fc2``. The output width is
11 for suzipu pitch, 7 for suzipu secondary and 17 for lvlvpu; two heads
together form the factored 77-class suzipu classifier.
"""

import hashlib
import json
from collections import namedtuple
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .nn import (
    RunningStats,
    Tape,
    batchnorm2d_forward,
    conv2d_forward,
    dropout_forward,
    flatten_forward,
    linear_forward,
    maxpool2d_forward,
    relu_forward,
)
from .utils import (
    BadMagicError,
    DataError,
    ModelFormatError,
    ShapeError,
    ShapeMismatchError,
    TruncatedDataError,
    UnsupportedVersionError,
    UsageError,
)

MAGIC = b"GLYF"
FORMAT_VERSION = 1
MODEL_SUFFIX = ".glyf"

JointPrediction = namedtuple(
    "JointPrediction", ["pitch", "secondary", "pitch_conf", "secondary_conf"]
)


@dataclass(frozen=True)
class ArchSpec:
    """Architecture of one classifier head.

    Parameters
    ----------
    n_classes : int
        Output width.
    input_side : int
        Side of the square single-channel input.
    conv_channels : tuple of int
        Output channels of the convolution blocks.
    fc1_width : int
        Width of the penultimate layer, the retrieval feature size.
    dropout_p : float
        Dropout probability after fc1.
    """

    n_classes: int
    input_side: int = 48
    conv_channels: tuple = (16, 32, 64)
    fc1_width: int = 128
    dropout_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        ints = [self.n_classes, self.input_side, self.fc1_width, *self.conv_channels]
        if not self.conv_channels or any(int(v) != v or v < 1 for v in ints):
            raise UsageError(f"Architecture extents must be positive integers: {self}")
        n_pool = 2 ** len(self.conv_channels)
        if self.input_side % n_pool:
            raise UsageError(
                f"input_side {self.input_side} must be divisible by {n_pool} "
                f"for {len(self.conv_channels)} pooling stages."
            )
        if not 0 <= self.dropout_p < 1:
            raise UsageError(f"dropout_p must satisfy 0 <= p < 1, got {self.dropout_p}")

    @property
    def final_side(self) -> int:
        """Spatial side after the last pooling stage."""
        return self.input_side // 2 ** len(self.conv_channels)

    @property
    def flatten_width(self) -> int:
        """Number of features entering fc1."""
        return self.conv_channels[-1] * self.final_side**2

    def tensor_shapes(self) -> dict:
        """Shapes of every stored tensor, in serialization order."""
        shapes = {}
        c_in = 1
        for i, c_out in enumerate(self.conv_channels, start=1):
            shapes[f"conv{i}.weight"] = (c_out, c_in, 3, 3)
            shapes[f"conv{i}.bias"] = (c_out,)
            for suffix in ("weight", "bias", "running_mean", "running_var"):
                shapes[f"bn{i}.{suffix}"] = (c_out,)
            c_in = c_out
        shapes["fc1.weight"] = (self.fc1_width, self.flatten_width)
        shapes["fc1.bias"] = (self.fc1_width,)
        shapes["fc2.weight"] = (self.n_classes, self.fc1_width)
        shapes["fc2.bias"] = (self.n_classes,)
        return shapes

    def trainable_names(self) -> list:
        """Names of the tensors the optimizer updates."""
        return [n for n in self.tensor_shapes() if "running" not in n]

    def to_dict(self) -> dict:
        """Return a JSON-compatible dict."""
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        """Build from :meth:`to_dict` output."""
        return cls(**d)


def count_parameters(arch: ArchSpec) -> int:
    """Closed-form count of trainable parameters.

    Parameters
    ----------
    arch : ArchSpec
        Architecture.

    Returns
    -------
    n : int
        Weights and biases of every layer plus batchnorm scales and shifts;
        running statistics are not counted.
    """
    n = 0
    c_in = 1
    for c_out in arch.conv_channels:
        n += c_out * c_in * 9 + c_out + 2 * c_out
        c_in = c_out
    n += arch.fc1_width * arch.flatten_width + arch.fc1_width
    n += arch.n_classes * arch.fc1_width + arch.n_classes
    return n


@dataclass
class ClassifierParams:
    """All tensors of one classifier head plus its label vocabulary.

    Attributes
    ----------
    arch : ArchSpec
        Architecture the tensors belong to.
    vocabulary : tuple of str
        Ordered class names; index ``i`` is output unit ``i``.
    tensors : dict
        Tensor name to array, shapes as in :meth:`ArchSpec.tensor_shapes`.
    """

    arch: ArchSpec
    vocabulary: tuple
    tensors: dict = field(repr=False)

    def __post_init__(self):
        self.vocabulary = tuple(self.vocabulary)
        if len(self.vocabulary) != self.arch.n_classes:
            raise UsageError(
                f"Vocabulary has {len(self.vocabulary)} labels but the "
                f"architecture has {self.arch.n_classes} outputs."
            )
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise UsageError(f"Vocabulary labels must be unique: {self.vocabulary}")
        expected = self.arch.tensor_shapes()
        if set(expected) != set(self.tensors):
            raise ShapeError(
                f"Tensor names {sorted(self.tensors)} do not match the "
                f"architecture {sorted(expected)}."
            )
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeError(
                    f"Tensor {name} has shape {self.tensors[name].shape}, "
                    f"architecture requires {shape}."
                )

    def copy(self, dtype=None) -> "ClassifierParams":
        """Deep copy, optionally casting every tensor."""
        tensors = {
            k: np.array(v, dtype=dtype or v.dtype, copy=True)
            for k, v in self.tensors.items()
        }
        return ClassifierParams(self.arch, self.vocabulary, tensors)

    def running_stats(self, i: int) -> RunningStats:
        """View on the running statistics of batchnorm block ``i``."""
        return RunningStats(
            self.tensors[f"bn{i}.running_mean"], self.tensors[f"bn{i}.running_var"]
        )

    def label_index(self) -> dict:
        """Map from label to output index."""
        return {label: i for i, label in enumerate(self.vocabulary)}


def build_classifier(
    arch: ArchSpec,
    rng: np.random.Generator,
    vocabulary: Optional[Sequence[str]] = None,
    zero_head: bool = False,
) -> ClassifierParams:
    """Initialize a classifier head.

    Convolution and dense weights are drawn Kaiming-uniform on the fan-in,
    ``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``; biases are zero, batchnorm
    scales one and shifts zero, running statistics mean 0 and variance 1.

    Parameters
    ----------
    arch : ArchSpec
        Architecture.
    rng : numpy.random.Generator
        Source of the initial weights.
    vocabulary : sequence of str, optional
        Class names; defaults to ``class_0 ... class_{K-1}``.
    zero_head : bool
        If True the output layer weights are zero, so every class starts with
        the same logit.

    Returns
    -------
    params : ClassifierParams
        Freshly initialized float32 parameters.
    """
    if vocabulary is None:
        vocabulary = [f"class_{i}" for i in range(arch.n_classes)]
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        kind = name.split(".")[1]
        if name.startswith(("conv", "fc")) and kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif kind in ("weight", "running_var"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    if zero_head:
        tensors["fc2.weight"][:] = 0
    return ClassifierParams(arch, tuple(vocabulary), tensors)


def _check_batch(params: ClassifierParams, batch: np.ndarray):
    side = params.arch.input_side
    if batch.ndim != 4 or batch.shape[1:] != (1, side, side):
        raise ShapeError(
            f"Classifier input must be B x 1 x {side} x {side}, got {batch.shape}."
        )


def _trunk(params, batch, mode, rng, tape):
    t = params.tensors
    x = batch
    for i in range(1, len(params.arch.conv_channels) + 1):
        x = conv2d_forward(
            x, t[f"conv{i}.weight"], t[f"conv{i}.bias"], 1, tape, f"conv{i}"
        )
        x = relu_forward(x, tape)
        x = batchnorm2d_forward(
            x,
            t[f"bn{i}.weight"],
            t[f"bn{i}.bias"],
            params.running_stats(i),
            mode=mode,
            tape=tape,
            name=f"bn{i}",
        )
        x = maxpool2d_forward(x, 2, tape)
    x = flatten_forward(x, tape)
    x = linear_forward(x, t["fc1.weight"], t["fc1.bias"], tape, "fc1")
    return relu_forward(x, tape)


def forward(
    params: ClassifierParams,
    batch: np.ndarray,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    tape: Optional[Tape] = None,
) -> np.ndarray:
    """Compute logits.

    Parameters
    ----------
    params : ClassifierParams
        Classifier head. In train mode its running statistics are updated.
    batch : numpy.ndarray
        Normalized images, ``B x 1 x side x side``.
    mode : str
        ``"train"`` (batch statistics, dropout) or ``"eval"``.
    rng : numpy.random.Generator, optional
        Dropout source, required in train mode.
    tape : Tape, optional
        Records the pass for :func:`backward`.

    Returns
    -------
    logits : numpy.ndarray
        ``B x n_classes``, before softmax.
    """
    _check_batch(params, batch)
    x = _trunk(params, batch, mode, rng, tape)
    x = dropout_forward(x, params.arch.dropout_p, mode, rng, tape)
    t = params.tensors
    return linear_forward(x, t["fc2.weight"], t["fc2.bias"], tape, "fc2")


def backward(tape: Tape, d_logits: np.ndarray) -> dict:
    """Gradients of every trainable tensor from a recorded :func:`forward`.

    Parameters
    ----------
    tape : Tape
        Tape passed to :func:`forward`.
    d_logits : numpy.ndarray
        Gradient of the loss with respect to the logits.

    Returns
    -------
    grads : dict
        Tensor name to gradient, for every trainable tensor.
    """
    _, grads = tape.named_gradients(d_logits)
    return grads


def extract_fc1(params: ClassifierParams, batch: np.ndarray) -> np.ndarray:
    """Penultimate features, taken after the fc1 ReLU and before dropout.

    Parameters
    ----------
    params : ClassifierParams
        Classifier head.
    batch : numpy.ndarray
        Normalized images, ``B x 1 x side x side``.

    Returns
    -------
    features : numpy.ndarray
        ``B x fc1_width`` non-negative activations.
    """
    _check_batch(params, batch)
    return _trunk(params, batch, "eval", None, None)


def _batched(fn, params, tensors, batch_size):
    if len(tensors) == 0:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate(
        [
            fn(params, tensors[i : i + batch_size])
            for i in range(0, len(tensors), batch_size)
        ]
    )


def predict_logits(params, tensors, batch_size=100) -> np.ndarray:
    """Eval-mode logits of a stacked dataset, computed in chunks."""
    out = _batched(forward, params, tensors, batch_size)
    return out.reshape(len(tensors), params.arch.n_classes)


def extract_features(params, tensors, batch_size=100) -> np.ndarray:
    """fc1 features of a stacked dataset, computed in chunks."""
    out = _batched(extract_fc1, params, tensors, batch_size)
    return out.reshape(len(tensors), params.arch.fc1_width)


@dataclass
class FactoredClassifier:
    """Pitch and secondary heads predicting the 77 joint suzipu classes."""

    pitch: ClassifierParams
    secondary: ClassifierParams

    def __post_init__(self):
        if self.pitch.arch.input_side != self.secondary.arch.input_side:
            raise UsageError("Both heads must share the same input transform.")

    @property
    def joint_vocabulary(self) -> tuple:
        """Product label space, ``"<pitch>+<secondary>"``."""
        return tuple(
            f"{p}+{s}" for p in self.pitch.vocabulary for s in self.secondary.vocabulary
        )

    def save(self, directory) -> list:
        """Write ``pitch.glyf`` and ``secondary.glyf`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [directory / f"{head}{MODEL_SUFFIX}" for head in ("pitch", "secondary")]
        save_classifier(paths[0], self.pitch)
        save_classifier(paths[1], self.secondary)
        return paths

    @classmethod
    def load(cls, directory) -> "FactoredClassifier":
        """Read the two heads written by :meth:`save`."""
        directory = Path(directory)
        return cls(
            load_classifier(directory / f"pitch{MODEL_SUFFIX}"),
            load_classifier(directory / f"secondary{MODEL_SUFFIX}"),
        )


def _argmax_conf(logits, temperature):
    probs = softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1)
    # np.argmax returns the lowest index among ties
    idx = np.argmax(logits, axis=1)
    return idx, probs[np.arange(len(idx)), idx]


def predict_joint(
    fc: FactoredClassifier, batch: np.ndarray, temperatures=(1.0, 1.0)
) -> list:
    """Predict pitch and secondary labels with their confidences.

    Parameters
    ----------
    fc : FactoredClassifier
        The two heads.
    batch : numpy.ndarray
        Normalized images, ``B x 1 x side x side``.
    temperatures : tuple of float
        Temperature of the pitch and secondary softmax; argmax is unaffected.

    Returns
    -------
    predictions : list of JointPrediction
        One ``(pitch, secondary, pitch_conf, secondary_conf)`` per image.
    """
    if min(temperatures) <= 0:
        raise UsageError(f"Temperatures must be positive, got {temperatures}.")
    p_idx, p_conf = _argmax_conf(predict_logits(fc.pitch, batch), temperatures[0])
    s_idx, s_conf = _argmax_conf(predict_logits(fc.secondary, batch), temperatures[1])
    return [
        JointPrediction(
            fc.pitch.vocabulary[p], fc.secondary.vocabulary[s], float(pc), float(sc)
        )
        for p, s, pc, sc in zip(p_idx, s_idx, p_conf, s_conf)
    ]


# -- serialization ------------------------------------------------------------


def serialize(params: ClassifierParams) -> bytes:
    """Encode a classifier head in the versioned GLYF format.

    The layout is the magic ``b"GLYF"``, the format version and the header
    length as little-endian uint32, a UTF-8 JSON header (architecture,
    vocabulary, tensor manifest with shapes and byte offsets) and finally the
    raw little-endian float32 tensor data in manifest order.

    Parameters
    ----------
    params : ClassifierParams
        Classifier head.

    Returns
    -------
    blob : bytes
        Encoded model.
    """
    manifest = []
    chunks = []
    offset = 0
    for name in params.arch.tensor_shapes():
        data = np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(params.tensors[name].shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {
            "arch": params.arch.to_dict(),
            "vocabulary": list(params.vocabulary),
            "tensors": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            np.array([FORMAT_VERSION, len(header)], dtype="<u4").tobytes(),
            header,
            *chunks,
        ]
    )


def deserialize(blob: bytes) -> ClassifierParams:
    """Decode a GLYF blob written by :func:`serialize`.

    Parameters
    ----------
    blob : bytes
        Encoded model.

    Returns
    -------
    params : ClassifierParams
        Decoded classifier head with float32 tensors.
    """
    if not blob or not MAGIC.startswith(blob[:4]):
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedDataError(f"truncated preamble: {len(blob)} of 12 bytes")
    version, header_len = np.frombuffer(blob, dtype="<u4", count=2, offset=4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"Unsupported model format version {int(version)} "
            f"(supported: {FORMAT_VERSION})."
        )
    if 12 + int(header_len) > len(blob):
        raise TruncatedDataError("truncated header")
    try:
        header = json.loads(blob[12 : 12 + int(header_len)].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
        vocabulary = header["vocabulary"]
        manifest = [
            (m["name"], tuple(m["shape"]), int(m["nbytes"]), int(m["offset"]))
            for m in header["tensors"]
        ]
    except (ValueError, KeyError, TypeError) as err:
        raise ModelFormatError(f"Corrupt model header: {err}") from err
    data = memoryview(blob)[12 + int(header_len) :]
    expected = arch.tensor_shapes()
    if sorted(m[0] for m in manifest) != sorted(expected):
        raise ShapeMismatchError(
            f"Header tensors {[m[0] for m in manifest]} do not match the "
            "architecture."
        )
    tensors = {}
    for name, shape, declared, offset in manifest:
        if shape != expected[name]:
            raise ShapeMismatchError(
                f"Tensor {name} declared as {shape}, architecture needs "
                f"{expected[name]}."
            )
        nbytes = 4 * int(np.prod(shape))
        if declared != nbytes:
            raise ShapeMismatchError(
                f"Tensor {name} declares {declared} bytes for shape {shape}."
            )
        if offset < 0 or offset + nbytes > len(data):
            raise TruncatedDataError(
                f"truncated tensor data: {name} needs bytes "
                f"[{offset}, {offset + nbytes}) of {len(data)}"
            )
        tensors[name] = (
            np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
            .astype(np.float32)
            .reshape(shape)
        )
    return ClassifierParams(arch, tuple(vocabulary), tensors)


def save_classifier(path, params: ClassifierParams):
    """Write ``params`` to ``path`` in the GLYF format."""
    Path(path).write_bytes(serialize(params))


def load_classifier(path) -> ClassifierParams:
    """Read a GLYF file."""
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"Cannot read model file {path}: {err}") from err
    return deserialize(blob)


def fingerprint(params: ClassifierParams) -> str:
    """SHA-256 hex digest of the serialized head."""
    return hashlib.sha256(serialize(params)).hexdigest()
