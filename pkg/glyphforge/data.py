"""Glyph corpora: manifest I/O, image transforms, splits and sampling.

A corpus is described by a UTF-8 JSON manifest::

    {"version": 1, "notation": "suzipu" | "lvlvpu",
     "instances": [{"id": str, "image": relative-path, "edition": str,
                    "excluded": bool?, "pitch": str?, "secondary": str?,
                    "lvlv": str?}]}

Images are 8-bit grayscale PNG or PGM files with a dark glyph on a light
ground. Image paths are relative to the manifest's directory.
"""

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, ImageChops, UnidentifiedImageError
from scipy.ndimage import median_filter

from .profiles import EditionProfile, ImbalanceProfile, default_profiles
from .synth import FULL_BOX, place, render_instance, suzipu_template, template_for
from .utils import (
    DataError,
    DuplicateInstanceError,
    ImageTooLargeError,
    ManifestSchemaError,
    MissingImageError,
    ReservedEditionError,
    ShapeError,
    UnknownLabelError,
    UsageError,
    VocabularyMismatchError,
    logger,
)

PITCH_LABELS = (
    "He",
    "Si",
    "Yi",
    "Shang",
    "Gou",
    "Che",
    "Gong",
    "Fan",
    "Liu",
    "Wu",
    "GaoWu",
)
SECONDARY_LABELS = ("None", "Dadun", "Xiaozhu", "Dingzhu", "Dazhu", "Zhe", "Ye")
LVLV_LABELS = (
    "Huangzhong",
    "Dalu",
    "Taicu",
    "Jiazhong",
    "Guxian",
    "Zhonglu",
    "Ruibin",
    "Linzhong",
    "Yize",
    "Nanlu",
    "Wuyi",
    "Yingzhong",
    "HuangzhongQing",
    "DaluQing",
    "TaicuQing",
    "JiazhongQing",
    "Zhezi",
)
EDITIONS = ("Lu", "Zhang", "Siku", "Zhu", "Shanghai")
ARTIFICIAL_EDITION = "artificial"
RESERVED_EDITIONS = EDITIONS + (ARTIFICIAL_EDITION,)

NOTATIONS = ("suzipu", "lvlvpu")
MANIFEST_VERSION = 1
MANIFEST_NAME = "corpus.json"
MAX_IMAGE_SIDE = 4096
JOINT_SEPARATOR = "+"

_LABEL_FIELDS = {"suzipu": ("pitch", "secondary"), "lvlvpu": ("lvlv",)}
_KEYS = {"suzipu": ("pitch", "secondary", "joint"), "lvlvpu": ("lvlv",)}


def joint_label(pitch: str, secondary: str) -> str:
    """Joint suzipu label, e.g. ``"Gong+Zhe"``."""
    return f"{pitch}{JOINT_SEPARATOR}{secondary}"


def vocabulary(key: str) -> tuple:
    """Ordered class names of a label key.

    Parameters
    ----------
    key : str
        ``"pitch"``, ``"secondary"``, ``"joint"`` or ``"lvlv"``.

    Returns
    -------
    labels : tuple of str
        11, 7, 77 or 17 class names.
    """
    if key == "pitch":
        return PITCH_LABELS
    if key == "secondary":
        return SECONDARY_LABELS
    if key == "joint":
        return tuple(joint_label(p, s) for p in PITCH_LABELS for s in SECONDARY_LABELS)
    if key == "lvlv":
        return LVLV_LABELS
    raise UsageError(f"Unknown label key {key!r}.")


def head_keys(notation: str) -> tuple:
    """Label keys a classifier head is trained on for ``notation``."""
    _check_notation(notation)
    return _LABEL_FIELDS[notation]


def stratification_key(notation: str) -> str:
    """Key used to stratify splits: the full annotation of an instance."""
    _check_notation(notation)
    return "joint" if notation == "suzipu" else "lvlv"


def _check_notation(notation):
    if notation not in NOTATIONS:
        raise UsageError(f"notation must be one of {NOTATIONS}, got {notation!r}.")


@dataclass(frozen=True, eq=False)
class GlyphInstance:
    """One annotated glyph image.

    Attributes
    ----------
    id : str
        Unique instance identifier.
    image : numpy.ndarray
        ``H x W`` uint8 grayscale image.
    notation : str
        ``"suzipu"`` or ``"lvlvpu"``.
    edition : str
        Edition identifier.
    pitch, secondary : str | None
        Suzipu labels.
    lvlv : str | None
        Lülüpu label.
    excluded : bool
        Loaded but barred from training and validation.
    source_path : str
        Image path relative to the manifest.
    """

    id: str
    image: np.ndarray = field(repr=False)
    notation: str
    edition: str
    pitch: Optional[str] = None
    secondary: Optional[str] = None
    lvlv: Optional[str] = None
    excluded: bool = False
    source_path: str = ""

    def __post_init__(self):
        _check_notation(self.notation)
        present = {k for k in ("pitch", "secondary", "lvlv") if getattr(self, k)}
        required = set(_LABEL_FIELDS[self.notation])
        if present != required:
            raise ManifestSchemaError(
                f"Instance {self.id!r} ({self.notation}) must carry exactly the "
                f"labels {sorted(required)}, got {sorted(present)}."
            )
        for key in required:
            if getattr(self, key) not in vocabulary(key):
                raise UnknownLabelError(
                    f"Instance {self.id!r} has unknown {key} label "
                    f"{getattr(self, key)!r}."
                )

    def label(self, key: str) -> str:
        """Class name of this instance under ``key``."""
        if key not in _KEYS[self.notation]:
            raise UsageError(f"Key {key!r} does not apply to {self.notation} glyphs.")
        if key == "joint":
            return joint_label(self.pitch, self.secondary)
        return getattr(self, key)

    def to_entry(self) -> dict:
        """Manifest entry of this instance."""
        entry = {"id": self.id, "image": self.source_path, "edition": self.edition}
        if self.excluded:
            entry["excluded"] = True
        for key in _LABEL_FIELDS[self.notation]:
            entry[key] = getattr(self, key)
        return entry


def _edition_order(editions) -> tuple:
    known = [e for e in EDITIONS if e in editions]
    return tuple(known + sorted(e for e in editions if e not in EDITIONS))


@dataclass(frozen=True)
class Corpus:
    """Immutable set of glyph instances of one notation."""

    instances: tuple
    notation: str

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        _check_notation(self.notation)
        seen = set()
        for inst in self.instances:
            if inst.notation != self.notation:
                raise VocabularyMismatchError(
                    f"Instance {inst.id!r} is {inst.notation}, corpus is "
                    f"{self.notation}."
                )
            if inst.id in seen:
                raise DuplicateInstanceError(f"Duplicate instance id {inst.id!r}.")
            seen.add(inst.id)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    @property
    def editions(self) -> tuple:
        """Editions present, historical editions first in canonical order."""
        return _edition_order({inst.edition for inst in self.instances})

    def with_instances(self, instances) -> "Corpus":
        """Corpus of the same notation holding ``instances``."""
        return Corpus(tuple(instances), self.notation)

    def by_edition(self, edition: str) -> list:
        """Instances of one edition."""
        return [inst for inst in self.instances if inst.edition == edition]

    def trainable(self) -> list:
        """Instances not flagged as excluded."""
        return [inst for inst in self.instances if not inst.excluded]

    def counts(self, key: Optional[str] = None) -> dict:
        """Instance counts per ``(label, edition)``.

        Parameters
        ----------
        key : str, optional
            Label key; defaults to the full annotation.

        Returns
        -------
        counts : dict
            ``(label, edition) -> count`` for every non-empty cell.
        """
        key = key or stratification_key(self.notation)
        return dict(Counter((inst.label(key), inst.edition) for inst in self.instances))

    def summary(self, key: Optional[str] = None) -> str:
        """Printable table of :meth:`counts`, one row per class."""
        key = key or stratification_key(self.notation)
        counts = self.counts(key)
        editions = self.editions
        width = max([len(label) for label in vocabulary(key)] + [5])
        lines = [
            "class".ljust(width)
            + "".join(e[:9].rjust(10) for e in editions)
            + "total".rjust(8)
        ]
        for label in vocabulary(key):
            row = [counts.get((label, e), 0) for e in editions]
            if sum(row):
                lines.append(
                    label.ljust(width)
                    + "".join(str(n).rjust(10) for n in row)
                    + str(sum(row)).rjust(8)
                )
        n_excluded = sum(inst.excluded for inst in self.instances)
        lines.append(
            f"{len(self)} instances, {n_excluded} excluded, "
            f"{len(editions)} editions ({self.notation})"
        )
        return "\n".join(lines)

    def to_manifest(self) -> dict:
        """Manifest dict of the corpus."""
        return {
            "version": MANIFEST_VERSION,
            "notation": self.notation,
            "instances": [inst.to_entry() for inst in self.instances],
        }

    def write_manifest(self, path):
        """Write the JSON manifest; image files are not touched."""
        Path(path).write_text(json.dumps(self.to_manifest(), indent=2) + "\n")


# -- loading ------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Decode an image file to an 8-bit grayscale array.

    Parameters
    ----------
    path : str | pathlib.Path
        PNG, PGM or any format Pillow reads.

    Returns
    -------
    image : numpy.ndarray
        ``H x W`` uint8 array.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"Image file not found: {path}")
    try:
        with Image.open(path) as img:
            if max(img.size) > MAX_IMAGE_SIDE:
                raise ImageTooLargeError(
                    f"{path} is {img.size[0]}x{img.size[1]} px; the limit is "
                    f"{MAX_IMAGE_SIDE} px a side."
                )
            return np.asarray(img.convert("L"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as err:
        raise DataError(f"Cannot decode image {path}: {err}") from err


def _entry_field(entry, name, kind, index, required=True):
    if name not in entry:
        if required:
            raise ManifestSchemaError(f"Instance #{index} lacks the field {name!r}.")
        return None
    value = entry[name]
    if not isinstance(value, kind):
        raise ManifestSchemaError(
            f"Instance #{index}: field {name!r} must be {kind.__name__}, "
            f"got {type(value).__name__}."
        )
    return value


def load_corpus(manifest_path, denoise: Optional[bool] = None) -> Corpus:
    """Load a corpus from its JSON manifest.

    Parameters
    ----------
    manifest_path : str | pathlib.Path
        Manifest file; image paths are resolved relative to its directory.
    denoise : bool, optional
        Apply a 3x3 median filter to suzipu patches. Ignored for lülüpu.

    Returns
    -------
    corpus : Corpus
        Every instance, including the ones flagged ``excluded``.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"Manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as err:
        raise ManifestSchemaError(f"{manifest_path} is not valid JSON: {err}") from err
    if not isinstance(manifest, dict):
        raise ManifestSchemaError("The manifest must be a JSON object.")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestSchemaError(
            f"Unsupported manifest version {manifest.get('version')!r} "
            f"(supported: {MANIFEST_VERSION})."
        )
    notation = manifest.get("notation")
    if notation not in NOTATIONS:
        raise ManifestSchemaError(
            f"Manifest notation must be one of {NOTATIONS}, got {notation!r}."
        )
    entries = manifest.get("instances")
    if not isinstance(entries, list):
        raise ManifestSchemaError("The manifest 'instances' field must be a list.")
    if denoise and notation != "suzipu":
        logger.info("Denoising applies to suzipu patches only; ignored.")
    denoise = bool(denoise) and notation == "suzipu"

    root = manifest_path.parent
    instances = []
    seen = set()
    for index, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ManifestSchemaError(f"Instance #{index} is not a JSON object.")
        inst_id = _entry_field(entry, "id", str, index)
        if inst_id in seen:
            raise DuplicateInstanceError(f"Duplicate instance id {inst_id!r}.")
        seen.add(inst_id)
        image_path = _entry_field(entry, "image", str, index)
        edition = _entry_field(entry, "edition", str, index)
        excluded = _entry_field(entry, "excluded", bool, index, required=False)
        labels = {
            key: _entry_field(entry, key, str, index, required=False)
            for key in ("pitch", "secondary", "lvlv")
        }
        image = read_image(root / image_path)
        if image.size == 0:
            raise DataError(f"Image of instance {inst_id!r} is empty.")
        if denoise:
            image = median_filter(image, size=3, mode="nearest")
        instances.append(
            GlyphInstance(
                inst_id,
                image,
                notation,
                edition,
                excluded=bool(excluded),
                source_path=image_path,
                **labels,
            )
        )
    corpus = Corpus(tuple(instances), notation)
    logger.info(
        "Loaded %d %s instances (%d excluded) from %s",
        len(corpus),
        notation,
        sum(inst.excluded for inst in corpus),
        manifest_path,
    )
    return corpus


def write_corpus(corpus: Corpus, out_dir, image_dir: str = "images") -> list:
    """Write a corpus as PNG images plus a manifest.

    Parameters
    ----------
    corpus : Corpus
        Corpus to write. Images are stored as ``<image_dir>/<id>.png``.
    out_dir : str | pathlib.Path
        Output directory, created if needed.
    image_dir : str
        Image subdirectory name.

    Returns
    -------
    paths : list of pathlib.Path
        The manifest followed by every image file.
    """
    out_dir = Path(out_dir)
    (out_dir / image_dir).mkdir(parents=True, exist_ok=True)
    written = []
    instances = []
    for inst in corpus:
        rel = f"{image_dir}/{inst.id}.png"
        Image.fromarray(inst.image).save(out_dir / rel)
        written.append(out_dir / rel)
        instances.append(replace(inst, source_path=rel))
    manifest = out_dir / MANIFEST_NAME
    corpus.with_instances(instances).write_manifest(manifest)
    return [manifest] + written


def merge_artificial(corpus: Corpus, artificial_dir) -> Corpus:
    """Append artificially generated training instances.

    Parameters
    ----------
    corpus : Corpus
        Corpus of real instances.
    artificial_dir : str | pathlib.Path
        Directory holding a ``corpus.json`` manifest whose instances all use
        the edition ``"artificial"``, or the manifest file itself. A
        directory without a manifest leaves the corpus unchanged.

    Returns
    -------
    corpus : Corpus
        ``corpus`` plus the artificial instances. Cross-validation routes
        them to the training pool only.
    """
    path = Path(artificial_dir)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    if path.is_dir() and not manifest.is_file():
        logger.info("No artificial manifest in %s; corpus unchanged.", path)
        return corpus
    extra = load_corpus(manifest)
    if extra.notation != corpus.notation:
        raise VocabularyMismatchError(
            f"Artificial data is {extra.notation}, corpus is {corpus.notation}."
        )
    for inst in extra:
        if inst.edition != ARTIFICIAL_EDITION:
            raise ReservedEditionError(
                f"Artificial instance {inst.id!r} uses edition {inst.edition!r}; "
                f"artificial data must use {ARTIFICIAL_EDITION!r}."
            )
    logger.info("Merged %d artificial instances.", len(extra))
    return corpus.with_instances(corpus.instances + extra.instances)


# -- transforms ---------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    """Bounds of the train-time augmentation and the eval placement.

    Parameters
    ----------
    resize_min, resize_max : int
        Range of the longest side after resizing, in pixels.
    rotate_deg : float
        Maximum absolute rotation in degrees.
    canvas : int
        Side of the square output.
    eval_resize : int
        Longest side at evaluation time.
    background : int
        Fill gray level of the canvas and of rotated corners.
    """

    resize_min: int = 30
    resize_max: int = 42
    rotate_deg: float = 9.0
    canvas: int = 48
    eval_resize: int = 40
    background: int = 255

    def __post_init__(self):
        if not 1 <= self.resize_min <= self.resize_max < self.canvas:
            raise UsageError(
                "Augmentation needs 1 <= resize_min <= resize_max < canvas, got "
                f"{self.resize_min}, {self.resize_max}, {self.canvas}."
            )
        if not 1 <= self.eval_resize <= self.canvas:
            raise UsageError(f"eval_resize must be in [1, canvas], got {self}.")
        if self.rotate_deg < 0:
            raise UsageError(f"rotate_deg must be >= 0, got {self.rotate_deg}.")

    @classmethod
    def for_notation(cls, notation: str, **overrides) -> "AugmentSpec":
        """Defaults of a notation: 30-42 px for suzipu, 33-46 px for lülüpu."""
        _check_notation(notation)
        bounds = {"suzipu": (30, 42), "lvlvpu": (33, 46)}[notation]
        values = {"resize_min": bounds[0], "resize_max": bounds[1]}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> dict:
        """Return a JSON-compatible dict."""
        return asdict(self)


def _as_pil(image) -> Image.Image:
    array = np.asarray(image)
    if array.ndim != 2 or array.size == 0:
        raise ShapeError(f"Expected a non-empty H x W image, got shape {array.shape}.")
    if max(array.shape) > MAX_IMAGE_SIDE:
        raise ImageTooLargeError(
            f"Image of shape {array.shape} exceeds {MAX_IMAGE_SIDE} px a side."
        )
    return Image.fromarray(array.astype(np.uint8, copy=False))


def _resize_longest(img: Image.Image, side: int) -> Image.Image:
    w, h = img.size
    scale = side / max(w, h)
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return img.resize(size, Image.Resampling.BILINEAR)


def _to_tensor(canvas: Image.Image) -> np.ndarray:
    arr = np.asarray(canvas, dtype=np.float32)
    return (arr / np.float32(127.5) - np.float32(1.0))[None]


def train_transform(image, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Randomly resize, rotate and place a glyph on the canvas.

    The rotated glyph is trimmed to its ink and shrunk to the canvas when it
    would not fit, so every placement keeps it whole.

    Parameters
    ----------
    image : numpy.ndarray
        ``H x W`` uint8 image.
    spec : AugmentSpec
        Augmentation bounds.
    rng : numpy.random.Generator
        Source of the resize, rotation and offset draws.

    Returns
    -------
    tensor : numpy.ndarray
        ``1 x canvas x canvas`` float32 with values in [-1, 1].
    """
    img = _as_pil(image)
    side = int(rng.integers(spec.resize_min, spec.resize_max + 1))
    angle = float(rng.uniform(-spec.rotate_deg, spec.rotate_deg))
    img = _resize_longest(img, side).rotate(
        angle,
        resample=Image.Resampling.BILINEAR,
        expand=True,
        fillcolor=spec.background,
    )
    ink = ImageChops.difference(img, Image.new("L", img.size, spec.background))
    bbox = ink.getbbox()
    if bbox is not None:
        img = img.crop(bbox)
    if max(img.size) > spec.canvas:
        img = _resize_longest(img, spec.canvas)
    offsets = [int(rng.integers(0, spec.canvas - extent + 1)) for extent in img.size]
    canvas = Image.new("L", (spec.canvas, spec.canvas), spec.background)
    canvas.paste(img, tuple(offsets))
    return _to_tensor(canvas)


def eval_transform(image, spec: Optional[AugmentSpec] = None) -> np.ndarray:
    """Resize the longest side to ``eval_resize`` and center on the canvas.

    Parameters
    ----------
    image : numpy.ndarray
        ``H x W`` uint8 image.
    spec : AugmentSpec, optional
        Only ``eval_resize``, ``canvas`` and ``background`` are used.

    Returns
    -------
    tensor : numpy.ndarray
        ``1 x canvas x canvas`` float32 with values in [-1, 1].
    """
    spec = spec or AugmentSpec()
    img = _resize_longest(_as_pil(image), spec.eval_resize)
    canvas = Image.new("L", (spec.canvas, spec.canvas), spec.background)
    w, h = img.size
    canvas.paste(img, ((spec.canvas - w) // 2, (spec.canvas - h) // 2))
    return _to_tensor(canvas)


def eval_tensors(instances: Sequence[GlyphInstance], spec=None) -> np.ndarray:
    """Stack eval transforms into a ``B x 1 x 48 x 48`` batch."""
    if not instances:
        canvas = (spec or AugmentSpec()).canvas
        return np.zeros((0, 1, canvas, canvas), dtype=np.float32)
    return np.stack([eval_transform(inst.image, spec) for inst in instances])


def train_tensors(
    instances: Sequence[GlyphInstance], spec: AugmentSpec, rng: np.random.Generator
) -> np.ndarray:
    """Stack train transforms into a ``B x 1 x 48 x 48`` batch."""
    return np.stack([train_transform(inst.image, spec, rng) for inst in instances])


# -- splits and sampling ------------------------------------------------------


def _group(instances, key) -> dict:
    groups = defaultdict(list)
    for inst in instances:
        groups[inst.label(key)].append(inst)
    return {
        label: sorted(groups[label], key=lambda inst: inst.id)
        for label in sorted(groups)
    }


def stratified_split(
    instances: Sequence[GlyphInstance],
    train_fraction: float = 0.75,
    seed: int = 0,
    key: Optional[str] = None,
):
    """Split every class into a training and a validation part.

    Parameters
    ----------
    instances : sequence of GlyphInstance
        Instances to split, all of one notation.
    train_fraction : float
        Share of each class assigned to training, rounded up.
    seed : int
        Seed of the per-class permutations.
    key : str, optional
        Stratification key; defaults to the full annotation.

    Returns
    -------
    train : list of GlyphInstance
    val : list of GlyphInstance
        Disjoint, together exhaustive. A class of ``n`` instances contributes
        ``ceil(train_fraction * n)`` to ``train``.
    """
    instances = list(instances)
    if not instances:
        raise DataError("Cannot split an empty set of instances.")
    if not 0 < train_fraction <= 1:
        raise UsageError(f"train_fraction must be in (0, 1], got {train_fraction}.")
    key = key or stratification_key(instances[0].notation)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for members in _group(instances, key).values():
        order = rng.permutation(len(members))
        n_train = math.ceil(train_fraction * len(members))
        train.extend(members[i] for i in order[:n_train])
        val.extend(members[i] for i in order[n_train:])
    return train, val


def class_uniform_batches(
    instances: Sequence[GlyphInstance],
    batch_size: int = 100,
    n_batches: int = 1,
    key: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[list]:
    """Yield batches drawn uniformly over classes, then over instances.

    Parameters
    ----------
    instances : sequence of GlyphInstance
        Training pool.
    batch_size : int
        Draws per batch.
    n_batches : int
        Number of batches.
    key : str, optional
        Label key defining the classes; defaults to the full annotation.
    rng : numpy.random.Generator
        Source of the draws.

    Yields
    ------
    batch : list of GlyphInstance
        ``batch_size`` instances drawn with replacement.
    """
    if not instances:
        raise DataError("Cannot sample batches from an empty training set.")
    if batch_size < 1 or n_batches < 0:
        raise UsageError(f"Invalid batch_size={batch_size} / n_batches={n_batches}.")
    key = key or stratification_key(instances[0].notation)
    rng = rng if rng is not None else np.random.default_rng(0)
    groups = list(_group(instances, key).values())
    sizes = np.array([len(g) for g in groups])
    for _ in range(n_batches):
        classes = rng.integers(0, len(groups), size=batch_size)
        members = rng.integers(0, sizes[classes])
        yield [groups[c][m] for c, m in zip(classes, members)]


# -- synthetic corpora --------------------------------------------------------


def gen_synthetic_corpus(
    notation: str,
    n_per_class: int,
    n_editions: int = 5,
    seed: int = 0,
    imbalance: Optional[ImbalanceProfile] = None,
    editions: Optional[Sequence[EditionProfile]] = None,
) -> Corpus:
    """Render a procedural corpus with edition styles.

    Parameters
    ----------
    notation : str
        ``"suzipu"`` (77 joint classes) or ``"lvlvpu"`` (17 classes).
    n_per_class : int
        Instances per class, spread round-robin over the editions. With a
        geometric ``imbalance`` this is the count of the most frequent class.
    n_editions : int
        Number of editions, taken from ``editions`` in order.
    seed : int
        Seed of the profiles, the class ranking and every instance.
    imbalance : ImbalanceProfile, optional
        Per-class counts; uniform if None.
    editions : sequence of EditionProfile, optional
        Edition styles; defaults to :func:`~glyphforge.profiles.default_profiles`.

    Returns
    -------
    corpus : Corpus
        In-memory corpus; ``source_path`` is ``images/<id>.png``.
    """
    _check_notation(notation)
    if n_per_class < 1:
        raise UsageError(f"n_per_class must be >= 1, got {n_per_class}.")
    if editions is None:
        editions = default_profiles(seed)[0]
    if not 1 <= n_editions <= len(editions):
        raise UsageError(
            f"n_editions must be in [1, {len(editions)}], got {n_editions}."
        )
    editions = list(editions)[:n_editions]
    imbalance = imbalance or ImbalanceProfile("uniform", 1.0)

    if notation == "suzipu":
        classes = [(p, s) for p in PITCH_LABELS for s in SECONDARY_LABELS]
        templates = [suzipu_template(p, s) for p, s in classes]
    else:
        classes = list(LVLV_LABELS)
        templates = [place(template_for(c, "lvlv"), FULL_BOX) for c in classes]
    rank = np.random.default_rng(seed).permutation(len(classes))
    counts = imbalance.counts(len(classes), n_per_class)

    instances = []
    for c, (cls, strokes) in enumerate(zip(classes, templates)):
        for j in range(counts[rank[c]]):
            edition = editions[(j + c) % n_editions]
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, j]))
            inst_id = f"syn-{c:03d}-{j:04d}"
            labels = (
                {"pitch": cls[0], "secondary": cls[1]}
                if notation == "suzipu"
                else {"lvlv": cls}
            )
            instances.append(
                GlyphInstance(
                    inst_id,
                    render_instance(strokes, edition, rng),
                    notation,
                    edition.name,
                    source_path=f"images/{inst_id}.png",
                    **labels,
                )
            )
    logger.info(
        "Generated %d synthetic %s instances over %d editions",
        len(instances),
        notation,
        n_editions,
    )
    return Corpus(tuple(instances), notation)
