"""Accuracy, CER and F1 reports, the Wilcoxon rank-sum test and timing."""

import math
import time
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import norm, rankdata
from threadpoolctl import threadpool_limits

from .data import AugmentSpec, GlyphInstance, eval_tensors, vocabulary
from .model import ClassifierParams, FactoredClassifier, predict_logits
from .utils import (
    DataError,
    NumericError,
    UnknownLabelError,
    UsageError,
    VocabularyMismatchError,
    logger,
)

ClassScore = namedtuple("ClassScore", ["label", "precision", "recall", "f1", "support"])
Timing = namedtuple("Timing", ["mean_seconds", "std_seconds"])

EXACT_WILCOXON_MAX = 8


def confusion_matrix(true_idx, pred_idx, n_classes: int) -> np.ndarray:
    """Counts with true classes on rows and predicted classes on columns."""
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(true_idx), np.asarray(pred_idx)), 1)
    return matrix


def scores_from_confusion(matrix: np.ndarray, vocab: Sequence[str]) -> list:
    """Per-class precision, recall, F1 and support of a confusion matrix.

    Zero denominators give 0. A class with zero support keeps ``support=0``
    and is left out of :func:`macro_f1`.
    """
    tp = np.diag(matrix).astype(np.float64)
    support = matrix.sum(axis=1)
    predicted = matrix.sum(axis=0)
    scores = []
    for i, label in enumerate(vocab):
        precision = tp[i] / predicted[i] if predicted[i] else 0.0
        recall = tp[i] / support[i] if support[i] else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        scores.append(
            ClassScore(
                label, float(precision), float(recall), float(f1), int(support[i])
            )
        )
    return scores


def _indices(labels, vocab, what):
    index = {label: i for i, label in enumerate(vocab)}
    try:
        return np.array([index[label] for label in labels], dtype=np.int64)
    except KeyError as err:
        raise UnknownLabelError(f"Unknown {what} label {err.args[0]!r}.") from err


def per_class_f1(predictions, labels, vocab: Sequence[str]) -> list:
    """Per-class precision, recall and F1.

    Parameters
    ----------
    predictions : sequence of str
        Predicted labels.
    labels : sequence of str
        True labels, aligned with ``predictions``.
    vocab : sequence of str
        Class names in output order.

    Returns
    -------
    scores : list of ClassScore
        One entry per vocabulary label.
    """
    if len(predictions) != len(labels):
        raise UsageError(
            f"{len(predictions)} predictions for {len(labels)} labels."
        )
    pred = _indices(predictions, vocab, "predicted")
    true = _indices(labels, vocab, "true")
    return scores_from_confusion(confusion_matrix(true, pred, len(vocab)), vocab)


def macro_f1(scores: Sequence[ClassScore]) -> float:
    """Mean F1 over classes with non-zero support."""
    present = [s.f1 for s in scores if s.support > 0]
    if not present:
        return math.nan
    return float(np.mean(present))


def decile_macro_f1(scores: Sequence[ClassScore], class_counts=None):
    """Macro-F1 of the rarest and of the commonest tenth of the classes.

    Parameters
    ----------
    scores : sequence of ClassScore
        Per-class scores.
    class_counts : dict, optional
        Label to frequency used for the ranking, e.g. training counts.
        Defaults to the evaluation support.

    Returns
    -------
    rare : float
        Macro-F1 over the ``ceil(n / 10)`` least frequent present classes.
    common : float
        Macro-F1 over the ``ceil(n / 10)`` most frequent present classes.
    """
    present = [s for s in scores if s.support > 0]
    if not present:
        raise DataError("No class with non-zero support.")
    counts = class_counts or {s.label: s.support for s in present}
    ranked = sorted(present, key=lambda s: (counts.get(s.label, 0), s.label))
    size = math.ceil(len(ranked) / 10)
    return macro_f1(ranked[:size]), macro_f1(ranked[-size:])


@dataclass
class EvalReport:
    """Result of one complete evaluation pass.

    Attributes
    ----------
    n_instances : int
        Number of evaluated instances.
    head_accuracy : dict
        Head key to accuracy in percent.
    joint_accuracy : float
        Percentage of instances every head got right.
    per_class : dict
        Head key to a list of :class:`ClassScore`.
    confusion : dict
        Head key to its confusion matrix.
    logits : dict
        Head key to the ``N x K`` eval logits.
    targets : dict
        Head key to the true class indices.
    """

    n_instances: int
    head_accuracy: dict
    joint_accuracy: float
    per_class: dict = field(repr=False)
    confusion: dict = field(repr=False)
    logits: dict = field(repr=False)
    targets: dict = field(repr=False)

    @property
    def cer(self) -> float:
        """Character error rate, ``100 - joint_accuracy``."""
        return 100.0 - self.joint_accuracy

    def to_dict(self) -> dict:
        """JSON-compatible summary (no logits)."""
        return {
            "n_instances": self.n_instances,
            "head_accuracy": dict(self.head_accuracy),
            "joint_accuracy": self.joint_accuracy,
            "cer": self.cer,
            "macro_f1": {k: macro_f1(v) for k, v in self.per_class.items()},
            "per_class": {
                k: [s._asdict() for s in v] for k, v in self.per_class.items()
            },
            "confusion": {k: v.tolist() for k, v in self.confusion.items()},
        }


Model = Union[ClassifierParams, FactoredClassifier]


def infer_key(params: ClassifierParams) -> str:
    """Label key whose vocabulary ``params`` predicts."""
    for key in ("pitch", "secondary", "lvlv", "joint"):
        if set(params.vocabulary) == set(vocabulary(key)):
            return key
    raise VocabularyMismatchError(
        f"Vocabulary {params.vocabulary} matches no known label set."
    )


def model_heads(model: Model, key: Optional[str] = None) -> dict:
    """Head key to :class:`ClassifierParams` of a single or factored model."""
    if isinstance(model, FactoredClassifier):
        return {"pitch": model.pitch, "secondary": model.secondary}
    return {key or infer_key(model): model}


def evaluate(
    model: Model,
    instances: Sequence[GlyphInstance],
    spec: Optional[AugmentSpec] = None,
    key: Optional[str] = None,
    tensors: Optional[np.ndarray] = None,
) -> EvalReport:
    """Evaluate a head or a factored classifier on every instance once.

    Parameters
    ----------
    model : ClassifierParams | FactoredClassifier
        Model to evaluate.
    instances : sequence of GlyphInstance
        Evaluation set.
    spec : AugmentSpec, optional
        Eval transform parameters.
    key : str, optional
        Label key of a single head; inferred from its vocabulary if None.
    tensors : numpy.ndarray, optional
        Precomputed eval tensors of ``instances``.

    Returns
    -------
    report : EvalReport
        Joint correctness requires every head to be correct.
    """
    instances = list(instances)
    if not instances:
        raise DataError("Cannot evaluate on an empty dataset.")
    heads = model_heads(model, key)
    if tensors is None:
        tensors = eval_tensors(instances, spec)
    correct = np.ones(len(instances), dtype=bool)
    accuracy, per_class, confusion, logits, targets = {}, {}, {}, {}, {}
    for head, params in heads.items():
        try:
            names = [inst.label(head) for inst in instances]
            true = _indices(names, params.vocabulary, head)
        except (UnknownLabelError, UsageError) as err:
            raise VocabularyMismatchError(str(err)) from err
        out = predict_logits(params, tensors)
        pred = np.argmax(out, axis=1)
        hit = pred == true
        correct &= hit
        accuracy[head] = 100.0 * float(np.mean(hit))
        confusion[head] = confusion_matrix(true, pred, params.arch.n_classes)
        per_class[head] = scores_from_confusion(confusion[head], params.vocabulary)
        logits[head] = out
        targets[head] = true
    return EvalReport(
        len(instances),
        accuracy,
        100.0 * float(np.mean(correct)),
        per_class,
        confusion,
        logits,
        targets,
    )


# -- Wilcoxon rank-sum --------------------------------------------------------


def _u_distribution(n: int, m: int) -> list:
    """Exact counts of the Mann-Whitney U statistic, index = U."""
    small, big = sorted((n, m))
    # counts[j] holds the distribution for (i, j); the largest element either
    # belongs to the first sample (beating all j others) or to the second.
    counts = [[1] for _ in range(big + 1)]
    for i in range(1, small + 1):
        row = [[1]]
        for j in range(1, big + 1):
            with_a = [0] * j + counts[j]
            with_b = row[j - 1]
            size = max(len(with_a), len(with_b))
            row.append(
                [
                    (with_a[u] if u < len(with_a) else 0)
                    + (with_b[u] if u < len(with_b) else 0)
                    for u in range(size)
                ]
            )
        counts = row
    return counts[big]


def wilcoxon_rank_sum(sample_a, sample_b):
    """Two-sided Wilcoxon rank-sum (Mann-Whitney U) test.

    The exact null distribution is used when the smaller sample has at most
    eight values and there are no ties; otherwise the normal approximation
    with tie and continuity correction.

    Parameters
    ----------
    sample_a, sample_b : array-like of float
        Non-empty samples.

    Returns
    -------
    statistic : float
        U of ``sample_a``: the number of pairs where it has the larger value,
        ties counting one half.
    p_value : float
        Two-sided p-value.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise UsageError("Both samples must be non-empty.")
    n, m = a.size, b.size
    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[:n].sum() - n * (n + 1) / 2)
    _, tie_counts = np.unique(ranks, return_counts=True)
    ties = bool(np.any(tie_counts > 1))

    if min(n, m) <= EXACT_WILCOXON_MAX and not ties:
        counts = _u_distribution(n, m)
        k = int(round(u))
        total = sum(counts)
        lower = sum(counts[: k + 1])
        upper = sum(counts[k:])
        return u, min(1.0, 2 * min(lower, upper) / total)

    mu = n * m / 2.0
    big_n = n + m
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (big_n * (big_n - 1))
    sigma = math.sqrt(n * m / 12.0 * ((big_n + 1) - tie_term))
    if sigma == 0:
        return u, 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / sigma
    return u, min(1.0, float(2 * norm.sf(z)))


# -- inference timing ---------------------------------------------------------


def _same_report(a: EvalReport, b: EvalReport) -> bool:
    return a.joint_accuracy == b.joint_accuracy and all(
        np.array_equal(a.confusion[k], b.confusion[k]) for k in a.confusion
    )


def time_inference(
    model: Model,
    instances: Sequence[GlyphInstance],
    repeats: int = 5,
    threads: int = 1,
    spec: Optional[AugmentSpec] = None,
):
    """Wall-clock seconds of ``repeats`` full evaluations after a warm-up.

    Each timed pass includes the eval transform and must reproduce the
    warm-up report exactly.

    Returns
    -------
    times : list of float
        Seconds per pass.
    report : EvalReport
        Report of the untimed warm-up pass.
    """
    if repeats < 1:
        raise UsageError(f"repeats must be >= 1, got {repeats}.")
    instances = list(instances)
    times = []
    with threadpool_limits(limits=threads):
        reference = evaluate(model, instances, spec)
        for i in range(repeats):
            start = time.perf_counter()
            report = evaluate(model, instances, spec)
            times.append(time.perf_counter() - start)
            if not _same_report(report, reference):
                raise NumericError(f"Timed pass {i + 1} changed the evaluation result.")
            logger.info("Inference pass %d/%d: %.3f s", i + 1, repeats, times[-1])
    return times, reference


def benchmark_inference(
    model: Model,
    instances: Sequence[GlyphInstance],
    repeats: int = 5,
    threads: int = 1,
    spec: Optional[AugmentSpec] = None,
) -> Timing:
    """Mean and sample standard deviation of full-dataset inference time.

    Parameters
    ----------
    model : ClassifierParams | FactoredClassifier
        Model to time.
    instances : sequence of GlyphInstance
        Dataset evaluated on every pass; corpus loading is not timed.
    repeats : int
        Number of timed passes.
    threads : int
        BLAS thread limit during the measurement.
    spec : AugmentSpec, optional
        Eval transform parameters.

    Returns
    -------
    timing : Timing
        ``(mean_seconds, std_seconds)``; the deviation is 0 for one pass.
    """
    times, _ = time_inference(model, instances, repeats, threads, spec)
    std = float(np.std(times, ddof=1)) if len(times) > 1 else 0.0
    return Timing(float(np.mean(times)), std)
