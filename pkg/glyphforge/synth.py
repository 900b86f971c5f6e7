"""Procedural stroke-template glyph renderer.

Every class name hashes to a fixed set of strokes (straight segments and
circular arcs in unit coordinates). Instances are drawn with per-instance
jitter of stroke width, shear, scale and position plus additive pixel noise,
on top of the style offsets of their edition.
"""

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .profiles import EditionProfile

BASE_SIDE = 60
BASE_STROKE_WIDTH = 4.0
ARC_POINTS = 9

# Regions of the unit square, as (x0, y0, x1, y1)
FULL_BOX = (0.15, 0.15, 0.85, 0.85)
PITCH_BOX = (0.08, 0.08, 0.68, 0.68)
SECONDARY_BOX = (0.62, 0.62, 0.94, 0.94)


@dataclass(frozen=True)
class Jitter:
    """Per-instance deformation bounds."""

    width: float = 1.0
    shear_deg: float = 4.0
    scale: float = 0.1
    shift_px: float = 3.0


def _label_rng(namespace: str, label: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{namespace}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def template_for(label: str, namespace: str = "glyph") -> list:
    """Deterministic stroke template of a class.

    Parameters
    ----------
    label : str
        Class name.
    namespace : str
        Keeps templates of different label families apart, e.g. a pitch and a
        secondary label that share a name.

    Returns
    -------
    strokes : list of numpy.ndarray
        Three to five polylines, each ``P x 2`` in unit coordinates.
    """
    rng = _label_rng(namespace, label)
    strokes = []
    for _ in range(rng.integers(3, 6)):
        if rng.random() < 0.5:
            strokes.append(rng.uniform(0.0, 1.0, size=(2, 2)))
        else:
            center = rng.uniform(0.3, 0.7, size=2)
            radius = rng.uniform(0.15, 0.35)
            start = rng.uniform(0.0, 2 * np.pi)
            sweep = rng.uniform(np.pi / 2, 3 * np.pi / 2)
            angles = start + np.linspace(0.0, sweep, ARC_POINTS)
            arc = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
            strokes.append(np.clip(arc, 0.0, 1.0))
    return strokes


def place(strokes: Sequence[np.ndarray], box) -> list:
    """Map unit-square strokes into a sub-box of the unit square."""
    x0, y0, x1, y1 = box
    origin = np.array([x0, y0])
    extent = np.array([x1 - x0, y1 - y0])
    return [origin + s * extent for s in strokes]


def suzipu_template(pitch: str, secondary: str) -> list:
    """Joint template: pitch component top left, secondary bottom right.

    The secondary label ``"None"`` adds no strokes.
    """
    strokes = place(template_for(pitch, "pitch"), PITCH_BOX)
    if secondary != "None":
        strokes += place(template_for(secondary, "secondary"), SECONDARY_BOX)
    return strokes


def render_strokes(
    strokes: Sequence[np.ndarray],
    side: int = BASE_SIDE,
    width: float = BASE_STROKE_WIDTH,
    shear_deg: float = 0.0,
    scale: float = 1.0,
    shift=(0.0, 0.0),
) -> np.ndarray:
    """Draw strokes black on a white square.

    Parameters
    ----------
    strokes : sequence of numpy.ndarray
        Polylines in unit coordinates.
    side : int
        Image side in pixels.
    width : float
        Stroke width in pixels, rounded and at least 1.
    shear_deg : float
        Horizontal shear about the image center.
    scale : float
        Isotropic scale about the image center.
    shift : tuple of float
        Translation in pixels.

    Returns
    -------
    image : numpy.ndarray
        ``side x side`` uint8 image.
    """
    image = Image.new("L", (side, side), 255)
    draw = ImageDraw.Draw(image)
    shear = np.tan(np.deg2rad(shear_deg))
    center = side / 2.0
    line_width = max(1, int(round(width)))
    for stroke in strokes:
        pts = (np.asarray(stroke, dtype=np.float64) * side - center) * scale
        pts[:, 0] += shear * pts[:, 1]
        pts += center + np.asarray(shift, dtype=np.float64)
        draw.line(
            [tuple(p) for p in pts.tolist()], fill=0, width=line_width, joint="curve"
        )
    return np.asarray(image, dtype=np.uint8)


def render_instance(
    strokes: Sequence[np.ndarray],
    edition: EditionProfile,
    rng: np.random.Generator,
    jitter: Optional[Jitter] = None,
    side: int = BASE_SIDE,
) -> np.ndarray:
    """Render one synthetic instance of a template in an edition's style.

    Parameters
    ----------
    strokes : sequence of numpy.ndarray
        Class template.
    edition : EditionProfile
        Style offsets of the edition.
    rng : numpy.random.Generator
        Source of the per-instance jitter and noise.
    jitter : Jitter, optional
        Jitter bounds; defaults to :class:`Jitter`.
    side : int
        Image side in pixels.

    Returns
    -------
    image : numpy.ndarray
        ``side x side`` uint8 image, dark glyph on light ground.
    """
    jitter = jitter or Jitter()
    width = (
        BASE_STROKE_WIDTH
        + edition.stroke_width_bias
        + rng.uniform(-jitter.width, jitter.width)
    )
    shear = edition.slant_deg + rng.uniform(-jitter.shear_deg, jitter.shear_deg)
    scale = 1.0 + rng.uniform(-jitter.scale, jitter.scale)
    shift = rng.uniform(-jitter.shift_px, jitter.shift_px, size=2)
    image = render_strokes(strokes, side, width, shear, scale, shift)
    if edition.noise_sigma > 0:
        noisy = image / 255.0 + rng.normal(0.0, edition.noise_sigma, size=image.shape)
        image = np.round(np.clip(noisy, 0.0, 1.0) * 255.0).astype(np.uint8)
    return image
