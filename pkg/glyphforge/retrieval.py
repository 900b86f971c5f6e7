"""Exact nearest-neighbor search over fc1 features.

Every corpus instance is embedded with the 128-d post-ReLU fc1 activation of
a trained head; similar-looking glyphs are found by a Euclidean scan of the
whole index.
"""

import json
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    AugmentSpec,
    Corpus,
    eval_tensors,
    eval_transform,
    stratification_key,
)
from .metrics import infer_key
from .model import ClassifierParams, extract_features, extract_fc1, fingerprint
from .utils import (
    BadMagicError,
    DataError,
    FingerprintMismatchError,
    ModelFormatError,
    ShapeMismatchError,
    TruncatedDataError,
    UnsupportedVersionError,
    UsageError,
    VocabularyMismatchError,
    logger,
)

MAGIC = b"GIDX"
FORMAT_VERSION = 1
INDEX_SUFFIX = ".gidx"

Neighbor = namedtuple("Neighbor", ["instance_id", "distance", "edition", "label"])

_NOTATION_OF_KEY = {
    "pitch": "suzipu",
    "secondary": "suzipu",
    "joint": "suzipu",
    "lvlv": "lvlvpu",
}


@dataclass(frozen=True, eq=False)
class FeatureIndex:
    """Feature vectors of a corpus under one model.

    Attributes
    ----------
    ids : tuple of str
        Instance ids, one per row of ``features``.
    editions : tuple of str
        Edition of each entry.
    labels : tuple of str
        Full annotation of each entry.
    features : numpy.ndarray
        ``N x D`` float32 features.
    fingerprint : str
        SHA-256 of the serialized model that produced the features.
    """

    ids: tuple
    editions: tuple
    labels: tuple
    features: np.ndarray = field(repr=False)
    fingerprint: str = ""

    def __post_init__(self):
        for name in ("ids", "editions", "labels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim != 2:
            raise ShapeMismatchError(f"Features must be N x D, got {features.shape}.")
        n = features.shape[0]
        if not len(self.ids) == len(self.editions) == len(self.labels) == n:
            raise ShapeMismatchError("Index metadata and features differ in length.")
        if len(set(self.ids)) != n:
            raise DataError("Index instance ids must be unique.")
        object.__setattr__(self, "features", features)
        ranks = {inst_id: r for r, inst_id in enumerate(sorted(self.ids))}
        object.__setattr__(
            self, "_id_rank", np.array([ranks[i] for i in self.ids], dtype=np.int64)
        )

    def __len__(self):
        return len(self.ids)

    @property
    def dimension(self) -> int:
        """Feature dimensionality."""
        return int(self.features.shape[1])

    def to_bytes(self) -> bytes:
        """Encode in the GIDX format.

        The layout is the magic ``b"GIDX"``, format version and header length
        as little-endian uint32, a UTF-8 JSON header (fingerprint, dimension,
        count and per-entry metadata) and the little-endian float32 features
        in row order.
        """
        header = json.dumps(
            {
                "fingerprint": self.fingerprint,
                "dimension": self.dimension,
                "count": len(self),
                "entries": [
                    {"id": i, "edition": e, "label": lab}
                    for i, e, lab in zip(self.ids, self.editions, self.labels)
                ],
            },
            sort_keys=True,
        ).encode("utf-8")
        return b"".join(
            [
                MAGIC,
                np.array([FORMAT_VERSION, len(header)], dtype="<u4").tobytes(),
                header,
                np.ascontiguousarray(self.features, dtype="<f4").tobytes(),
            ]
        )

    def save(self, path):
        """Write the index to ``path``."""
        Path(path).write_bytes(self.to_bytes())


def index_from_bytes(blob: bytes) -> FeatureIndex:
    """Decode a GIDX blob."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {blob[:4]!r}")
    version, header_len = (int(v) for v in np.frombuffer(blob, "<u4", 2, 4))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"Unsupported index format version {version}.")
    if 12 + header_len > len(blob):
        raise TruncatedDataError("truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        count, dim = int(header["count"]), int(header["dimension"])
        entries = header["entries"]
        fp = header["fingerprint"]
    except (ValueError, KeyError, TypeError) as err:
        raise ModelFormatError(f"Corrupt index header: {err}") from err
    if len(entries) != count:
        raise ShapeMismatchError(f"Header lists {len(entries)} entries, count {count}.")
    data = blob[12 + header_len :]
    if len(data) < 4 * count * dim:
        raise TruncatedDataError(
            f"truncated feature data: need {4 * count * dim} bytes, got {len(data)}"
        )
    features = np.frombuffer(data, "<f4", count * dim).astype(np.float32)
    return FeatureIndex(
        [e["id"] for e in entries],
        [e["edition"] for e in entries],
        [e["label"] for e in entries],
        features.reshape(count, dim),
        fp,
    )


def load_index(path) -> FeatureIndex:
    """Read an index written by :meth:`FeatureIndex.save`."""
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"Cannot read index file {path}: {err}") from err
    return index_from_bytes(blob)


def build_feature_index(
    model: ClassifierParams, corpus: Corpus, spec: Optional[AugmentSpec] = None
) -> FeatureIndex:
    """Embed every corpus instance with ``model``'s fc1 layer.

    Parameters
    ----------
    model : ClassifierParams
        Trained head whose vocabulary belongs to the corpus notation.
    corpus : Corpus
        Instances to index, eval-transformed.
    spec : AugmentSpec, optional
        Eval transform parameters.

    Returns
    -------
    index : FeatureIndex
        One entry per instance, in corpus order.
    """
    key = infer_key(model)
    if _NOTATION_OF_KEY[key] != corpus.notation:
        raise VocabularyMismatchError(
            f"A {key} model cannot index a {corpus.notation} corpus."
        )
    instances = list(corpus)
    features = extract_features(model, eval_tensors(instances, spec))
    label_key = stratification_key(corpus.notation)
    logger.info(
        "Indexed %d instances (%d-d features)", len(instances), model.arch.fc1_width
    )
    return FeatureIndex(
        [inst.id for inst in instances],
        [inst.edition for inst in instances],
        [inst.label(label_key) for inst in instances],
        features,
        fingerprint(model),
    )


def _query_feature(index, query, model, spec):
    query = np.asarray(query)
    if query.ndim == 1:
        if query.shape[0] != index.dimension:
            raise ShapeMismatchError(
                f"Query has {query.shape[0]} features, index {index.dimension}."
            )
        return query.astype(np.float32)
    if model is None:
        raise UsageError("Querying with an image requires the indexed model.")
    if model.arch.fc1_width != index.dimension:
        raise FingerprintMismatchError(
            f"Model features are {model.arch.fc1_width}-d, index {index.dimension}-d."
        )
    if fingerprint(model) != index.fingerprint:
        raise FingerprintMismatchError(
            "The query model is not the model the index was built with."
        )
    return extract_fc1(model, eval_transform(query, spec)[None])[0]


def query_knn(
    index: FeatureIndex,
    query,
    k: int = 3,
    model: Optional[ClassifierParams] = None,
    spec: Optional[AugmentSpec] = None,
) -> list:
    """Exact Euclidean k nearest neighbors.

    Parameters
    ----------
    index : FeatureIndex
        Index to search.
    query : numpy.ndarray
        A feature vector of the index dimension, or an ``H x W`` image.
    k : int
        Number of neighbors.
    model : ClassifierParams, optional
        Indexed model, required for image queries.
    spec : AugmentSpec, optional
        Eval transform parameters of image queries.

    Returns
    -------
    neighbors : list of Neighbor
        Ascending distance, ties broken by ascending instance id.
    """
    if len(index) == 0:
        raise DataError("Cannot query an empty index.")
    if not 1 <= k <= len(index):
        raise UsageError(f"k must be in [1, {len(index)}], got {k}.")
    feature = _query_feature(index, query, model, spec).astype(np.float64)
    diff = index.features.astype(np.float64) - feature
    distances = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((index._id_rank, distances))[:k]
    return [
        Neighbor(index.ids[i], float(distances[i]), index.editions[i], index.labels[i])
        for i in order
    ]


def all_neighbors(index: FeatureIndex, k: int = 3) -> dict:
    """The ``k`` nearest other entries of every indexed instance."""
    if len(index) < 2:
        raise DataError("Neighbor tables need at least two indexed instances.")
    k = min(k, len(index) - 1)
    table = {}
    for i, inst_id in enumerate(index.ids):
        hits = query_knn(index, index.features[i], k + 1)
        table[inst_id] = [n for n in hits if n.instance_id != inst_id][:k]
    return table
