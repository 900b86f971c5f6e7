"""Edition style and class imbalance profiles for synthetic corpora."""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .utils import DataError, UsageError

EDITION_NAMES = ("Lu", "Zhang", "Siku", "Zhu", "Shanghai")
OUTLIER_EDITION = "Zhu"
IMBALANCE_KINDS = ("uniform", "geometric")


@dataclass(frozen=True)
class EditionProfile:
    """Rendering style shared by every glyph of one synthetic edition.

    Parameters
    ----------
    name : str
        Edition identifier.
    stroke_width_bias : float
        Pixels added to every stroke width at the 60 px base rendering.
    slant_deg : float
        Horizontal shear applied to every glyph, in degrees.
    noise_sigma : float
        Standard deviation of additive pixel noise on the [0, 1] scale.
    is_outlier : bool
        Whether the edition is the designated distribution-shifted one.
    """

    name: str
    stroke_width_bias: float = 0.0
    slant_deg: float = 0.0
    noise_sigma: float = 0.03
    is_outlier: bool = False

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise UsageError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        """Return a JSON-compatible dict."""
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EditionProfile":
        """Build from :meth:`to_dict` output."""
        return cls(**d)


@dataclass(frozen=True)
class ImbalanceProfile:
    """Per-class instance counts of a synthetic corpus.

    With ``kind="geometric"`` the class of rank ``r`` receives
    ``ceil(base * ratio**r)`` instances, never fewer than one.
    """

    kind: str = "geometric"
    ratio: float = 0.85

    def __post_init__(self):
        if self.kind not in IMBALANCE_KINDS:
            raise UsageError(
                f"Imbalance kind must be one of {IMBALANCE_KINDS}, got {self.kind!r}"
            )
        if not 0 < self.ratio <= 1:
            raise UsageError(f"Imbalance ratio must be in (0, 1], got {self.ratio}")

    def counts(self, n_classes: int, base: int) -> list:
        """Instance count for each class rank.

        Parameters
        ----------
        n_classes : int
            Number of classes.
        base : int
            Count of the most frequent class.

        Returns
        -------
        counts : list of int
            Non-increasing counts, each at least 1.
        """
        if base < 1:
            raise UsageError(f"base must be >= 1, got {base}")
        if self.kind == "uniform":
            return [int(base)] * n_classes
        return [max(1, math.ceil(base * self.ratio**r)) for r in range(n_classes)]

    def to_dict(self) -> dict:
        """Return a JSON-compatible dict."""
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ImbalanceProfile":
        """Build from :meth:`to_dict` output."""
        return cls(**d)


def default_profiles(seed: int = 0):
    """Five edition profiles with one outlier, plus a geometric imbalance.

    The regular editions draw a small stroke-width bias, slant and noise
    level from ``seed``; the outlier edition uses fixed amplified offsets.

    Parameters
    ----------
    seed : int
        Seed for the regular editions' offsets.

    Returns
    -------
    editions : list of EditionProfile
        Profiles named after the five historical editions.
    imbalance : ImbalanceProfile
        Geometric profile with ratio 0.85.
    """
    rng = np.random.default_rng(seed)
    editions = []
    for name in EDITION_NAMES:
        bias, slant, noise = (
            rng.uniform(-0.5, 0.5),
            rng.uniform(-3.0, 3.0),
            rng.uniform(0.02, 0.05),
        )
        if name == OUTLIER_EDITION:
            editions.append(EditionProfile(name, 2.5, 10.0, 0.15, is_outlier=True))
        else:
            editions.append(
                EditionProfile(name, float(bias), float(slant), float(noise))
            )
    return editions, ImbalanceProfile("geometric", 0.85)


def save_profiles(path, editions, imbalance):
    """Write profiles to a JSON file."""
    payload = {
        "editions": [e.to_dict() for e in editions],
        "imbalance": imbalance.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_profiles(path):
    """Read profiles written by :func:`save_profiles`."""
    try:
        payload = json.loads(Path(path).read_text())
        editions = [EditionProfile.from_dict(d) for d in payload["editions"]]
        imbalance = ImbalanceProfile.from_dict(payload["imbalance"])
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise DataError(f"Cannot read profiles {path}: {err}") from err
    return editions, imbalance
