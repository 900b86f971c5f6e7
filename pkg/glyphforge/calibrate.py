"""Temperature scaling and expected calibration error."""

import csv
import json
import math
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax, softmax

from .utils import DataError, UsageError, logger

T_BOUNDS = (0.05, 20.0)
T_TOLERANCE = 1e-4
MIN_FIT_SIZE = 10
N_BINS = 10

BinStats = namedtuple(
    "BinStats", ["lower", "upper", "count", "mean_confidence", "accuracy"]
)


def _check_logits(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise UsageError(
            f"Expected N x K logits and N labels, got {logits.shape} and "
            f"{labels.shape}."
        )
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise UsageError(f"Labels must lie in [0, {logits.shape[1]}).")
    return logits, labels


def nll(logits, labels, temperature: float = 1.0) -> float:
    """Mean negative log-likelihood of ``softmax(logits / temperature)``."""
    logits, labels = _check_logits(logits, labels)
    logp = log_softmax(logits / temperature, axis=1)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def _fit(logits, labels):
    logits, labels = _check_logits(logits, labels)
    if len(labels) < MIN_FIT_SIZE:
        raise DataError(
            f"Temperature fitting needs at least {MIN_FIT_SIZE} samples, "
            f"got {len(labels)}."
        )
    if np.all(labels == labels[0]):
        logger.warning("All calibration labels are identical; keeping T = 1.")
        return 1.0, True
    result = minimize_scalar(
        lambda log_t: nll(logits, labels, math.exp(log_t)),
        bounds=(math.log(T_BOUNDS[0]), math.log(T_BOUNDS[1])),
        method="bounded",
        options={"xatol": T_TOLERANCE},
    )
    temperature = float(math.exp(result.x))
    if nll(logits, labels, temperature) > nll(logits, labels, 1.0):
        temperature = 1.0
    return temperature, False


def fit_temperature(val_logits, val_labels) -> float:
    """Temperature minimizing the validation negative log-likelihood.

    The search runs over ``log T`` with ``T`` in [0.05, 20] using a bounded
    scalar minimizer. Argmax predictions are unaffected by any ``T > 0``.

    Parameters
    ----------
    val_logits : array-like
        ``N x K`` logits, ``N >= 10``.
    val_labels : array-like of int
        True class indices.

    Returns
    -------
    temperature : float
        Fitted temperature, 1.0 when every label is identical.
    """
    return _fit(val_logits, val_labels)[0]


def apply_temperature(logits, temperature: float) -> np.ndarray:
    """Row-wise ``softmax(logits / temperature)``."""
    if not temperature > 0:
        raise UsageError(f"Temperature must be > 0, got {temperature}.")
    return softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1)


def reliability_bins(confidences, correct, n_bins: int = N_BINS) -> list:
    """Per-bin confidence and accuracy over equal-width confidence bins.

    Bins are left-closed and right-open except the last one, which includes
    1.0.

    Parameters
    ----------
    confidences : array-like of float
        Confidence of each prediction, in [0, 1].
    correct : array-like of bool
        Whether each prediction is right.
    n_bins : int
        Number of bins.

    Returns
    -------
    bins : list of BinStats
        Empty bins have count 0 and NaN mean confidence and accuracy.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, confidences, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        bins.append(
            BinStats(
                float(edges[b]),
                float(edges[b + 1]),
                count,
                float(confidences[mask].mean()) if count else math.nan,
                float(correct[mask].mean()) if count else math.nan,
            )
        )
    return bins


def ece_from_bins(bins) -> float:
    """Count-weighted mean ``|accuracy - confidence|`` over non-empty bins."""
    total = sum(b.count for b in bins)
    if total == 0:
        raise DataError("ECE of an empty prediction set is undefined.")
    return float(
        sum(
            b.count / total * abs(b.accuracy - b.mean_confidence)
            for b in bins
            if b.count
        )
    )


def ece10(probabilities, labels) -> float:
    """Expected calibration error over 10 equidistant confidence bins.

    Parameters
    ----------
    probabilities : array-like
        ``N x K`` rows summing to 1.
    labels : array-like of int
        True class indices.

    Returns
    -------
    ece : float
        Value in [0, 1].
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise UsageError(f"Expected N x K probabilities, got {probs.shape}.")
    if not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-4):
        raise UsageError("Probability rows must sum to 1 within 1e-4.")
    correct = np.argmax(probs, axis=1) == labels
    return ece_from_bins(reliability_bins(probs.max(axis=1), correct))


def joint_ece(pitch_probs, secondary_probs, pitch_labels, secondary_labels) -> float:
    """ECE10 of a factored classifier.

    The joint confidence is the product of both heads' confidences and a
    prediction is correct when both heads are.
    """
    p = np.asarray(pitch_probs, dtype=np.float64)
    s = np.asarray(secondary_probs, dtype=np.float64)
    correct = (np.argmax(p, axis=1) == np.asarray(pitch_labels)) & (
        np.argmax(s, axis=1) == np.asarray(secondary_labels)
    )
    confidence = p.max(axis=1) * s.max(axis=1)
    return ece_from_bins(reliability_bins(confidence, correct))


def _bins(logits, labels, temperature):
    probs = apply_temperature(logits, temperature)
    return reliability_bins(probs.max(axis=1), np.argmax(probs, axis=1) == labels)


def _bin_dict(b: BinStats) -> dict:
    # empty bins carry NaN, which JSON cannot represent
    return {
        k: None if isinstance(v, float) and math.isnan(v) else v
        for k, v in b._asdict().items()
    }


@dataclass
class CalibrationReport:
    """Temperature fit and calibration before and after scaling.

    Attributes
    ----------
    temperature : float
        Fitted temperature.
    degenerate : bool
        True when the fit was skipped because every label is identical.
    nll_before, nll_after : float
        Negative log-likelihood on the fitting set at T = 1 and fitted T.
    ece_before, ece_after : float
        ECE10 on the evaluation set at T = 1 and fitted T.
    evaluated_on : str
        ``"test"`` or ``"validation"``.
    bins_before, bins_after : list of BinStats
        Reliability tables of the evaluation set.
    """

    temperature: float
    degenerate: bool
    nll_before: float
    nll_after: float
    ece_before: float
    ece_after: float
    evaluated_on: str
    bins_before: list = field(repr=False)
    bins_after: list = field(repr=False)

    def to_dict(self) -> dict:
        """JSON-compatible dict."""
        return {
            "temperature": self.temperature,
            "degenerate": self.degenerate,
            "nll_before": self.nll_before,
            "nll_after": self.nll_after,
            "ece_before": self.ece_before,
            "ece_after": self.ece_after,
            "evaluated_on": self.evaluated_on,
            "bins_before": [_bin_dict(b) for b in self.bins_before],
            "bins_after": [_bin_dict(b) for b in self.bins_after],
        }

    def to_json(self, path):
        """Write :meth:`to_dict` as JSON."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def bins_to_csv(self, path):
        """Write the before/after reliability tables for plotting."""
        write_bins_csv(path, {"": self})


def write_bins_csv(path, reports: dict):
    """Write the reliability tables of several heads into one CSV.

    ``reports`` maps a head key to its :class:`CalibrationReport`; a head
    column is only written when a key is non-empty.
    """
    with_head = any(reports)
    with open(path, "w", newline="") as fid:
        writer = csv.writer(fid)
        writer.writerow(["head"] * with_head + ["scaling", *BinStats._fields])
        for head, report in reports.items():
            tables = (("before", report.bins_before), ("after", report.bins_after))
            for name, bins in tables:
                for b in bins:
                    writer.writerow([head] * with_head + [name, *(repr(v) for v in b)])


def calibrate(
    val_logits,
    val_labels,
    test_logits: Optional[np.ndarray] = None,
    test_labels: Optional[np.ndarray] = None,
) -> CalibrationReport:
    """Fit a temperature on validation logits and report its effect.

    Parameters
    ----------
    val_logits, val_labels : array-like
        Fitting set.
    test_logits, test_labels : array-like, optional
        Held-out set the ECE is reported on; the validation set otherwise.

    Returns
    -------
    report : CalibrationReport
    """
    temperature, degenerate = _fit(val_logits, val_labels)
    if test_logits is None:
        eval_logits, eval_labels, split = val_logits, val_labels, "validation"
    else:
        eval_logits, eval_labels = _check_logits(test_logits, test_labels)
        split = "test"
    eval_labels = np.asarray(eval_labels, dtype=np.int64)
    before = _bins(eval_logits, eval_labels, 1.0)
    after = _bins(eval_logits, eval_labels, temperature)
    report = CalibrationReport(
        temperature,
        degenerate,
        nll(val_logits, val_labels, 1.0),
        nll(val_logits, val_labels, temperature),
        ece_from_bins(before),
        ece_from_bins(after),
        split,
        before,
        after,
    )
    logger.info(
        "Temperature %.4f: %s ECE10 %.4f -> %.4f",
        temperature,
        split,
        report.ece_before,
        report.ece_after,
    )
    return report
