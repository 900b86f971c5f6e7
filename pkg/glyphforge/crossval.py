"""Leave-one-edition-out cross-validation.

Each edition in turn is the test set. The remaining editions form a pool that
is split 75/25 per class into training and validation data, and several
models per head are trained on the same split with distinct seeds. Artificial
instances only ever enlarge the training part.
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .calibrate import CalibrationReport, apply_temperature, calibrate, joint_ece
from .data import (
    ARTIFICIAL_EDITION,
    Corpus,
    eval_tensors,
    head_keys,
    merge_artificial,
    stratified_split,
)
from .metrics import EvalReport, evaluate
from .model import ClassifierParams, FactoredClassifier, save_classifier
from .train import TrainConfig, default_arch, derive_seed, focal_loss, train_model
from .utils import DataError, UsageError, logger

PAIRINGS = ("all", "paired")
AGGREGATE_ROW = "Aggregated"


def mean_std(values) -> tuple:
    """Mean and sample standard deviation; the deviation of one value is 0."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return math.nan, math.nan
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


@dataclass(frozen=True)
class FoldAudit:
    """Instance ids that went into one fold."""

    edition: str
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple

    def check(self):
        """Raise if any test instance reached training or validation."""
        leaked = set(self.test_ids) & (set(self.train_ids) | set(self.val_ids))
        if leaked:
            raise DataError(
                f"Fold {self.edition}: {len(leaked)} test instances leaked into "
                f"training or validation, e.g. {sorted(leaked)[:3]}."
            )

    def to_dict(self) -> dict:
        """JSON-compatible dict."""
        return {
            "edition": self.edition,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }


@dataclass
class ModelRecord:
    """One trained repeat of one head in one fold."""

    edition: str
    head: str
    repeat: int
    seed: int
    val_acc: float
    val_loss: float
    test_acc: float
    calibration: Optional[CalibrationReport] = field(default=None, repr=False)
    params: Optional[ClassifierParams] = field(default=None, repr=False)
    val_hits: np.ndarray = field(default=None, repr=False)
    test_hits: np.ndarray = field(default=None, repr=False)
    test_logits: np.ndarray = field(default=None, repr=False)
    test_targets: np.ndarray = field(default=None, repr=False)

    def selection_key(self) -> tuple:
        """Higher validation accuracy first, then lower loss, then lower seed."""
        acc = self.val_acc if math.isfinite(self.val_acc) else -math.inf
        loss = self.val_loss if math.isfinite(self.val_loss) else math.inf
        return (-acc, loss, self.seed)

    def to_dict(self) -> dict:
        """JSON-compatible summary."""
        d = {
            "edition": self.edition,
            "head": self.head,
            "repeat": self.repeat,
            "seed": self.seed,
            "val_acc": _clean(self.val_acc),
            "val_loss": _clean(self.val_loss),
            "test_acc": self.test_acc,
        }
        if self.calibration is not None:
            d["temperature"] = self.calibration.temperature
            d["ece_before"] = self.calibration.ece_before
            d["ece_after"] = self.calibration.ece_after
        return d


@dataclass
class FoldResult:
    """All models trained with one edition held out.

    Attributes
    ----------
    edition : str
        Held-out edition.
    audit : FoldAudit
        Ids used for training, validation and test.
    models : dict
        Head key to its :class:`ModelRecord` list, in repeat order.
    joint : list of tuple
        ``(val_acc, test_acc)`` of every evaluated head combination.
    best : dict
        Head key to the best-by-validation record.
    best_joint : tuple
        ``(val_acc, test_acc)`` of the best models combined.
    best_report : EvalReport
        Test report of the best models combined.
    best_joint_ece : tuple | None
        Joint ECE10 of the best suzipu pair before and after scaling.
    """

    edition: str
    audit: FoldAudit
    models: dict
    joint: list
    best: dict
    best_joint: tuple
    best_report: EvalReport = field(repr=False)
    best_joint_ece: Optional[tuple] = None

    @property
    def heads(self) -> tuple:
        """Head keys in training order."""
        return tuple(self.models)

    def to_dict(self) -> dict:
        """JSON-compatible summary."""
        calibrated = [
            m.calibration
            for records in self.models.values()
            for m in records
            if m.calibration is not None
        ]
        d = {
            "edition": self.edition,
            "n_train": len(self.audit.train_ids),
            "n_val": len(self.audit.val_ids),
            "n_test": len(self.audit.test_ids),
            "models": [m.to_dict() for ms in self.models.values() for m in ms],
            "joint": [[_clean(v), t] for v, t in self.joint],
            "best": {h: m.to_dict() for h, m in self.best.items()},
            "best_joint": [_clean(self.best_joint[0]), self.best_joint[1]],
            "best_report": self.best_report.to_dict(),
        }
        if calibrated:
            d["ece_max_before"] = max(c.ece_before for c in calibrated)
            d["ece_max_after"] = max(c.ece_after for c in calibrated)
        if self.best_joint_ece is not None:
            d["best_joint_ece"] = list(self.best_joint_ece)
        return d


def _columns(heads) -> list:
    cols = [f"val_{h}" for h in heads]
    if len(heads) > 1:
        cols.append("val_total")
    cols += [f"test_{h}" for h in heads]
    if len(heads) > 1:
        cols.append("test_total")
    return cols + ["cer"]


def _samples(fold: FoldResult) -> dict:
    samples = {}
    for h, records in fold.models.items():
        samples[f"val_{h}"] = [m.val_acc for m in records]
        samples[f"test_{h}"] = [m.test_acc for m in records]
    if len(fold.heads) > 1:
        samples["val_total"] = [v for v, _ in fold.joint]
        samples["test_total"] = [t for _, t in fold.joint]
    samples["cer"] = [100.0 - t for _, t in fold.joint]
    return samples


def _best_values(fold: FoldResult) -> dict:
    values = {}
    for h, m in fold.best.items():
        values[f"val_{h}"] = m.val_acc
        values[f"test_{h}"] = m.test_acc
    if len(fold.heads) > 1:
        values["val_total"], values["test_total"] = fold.best_joint
    values["cer"] = 100.0 - fold.best_joint[1]
    return values


def _fmt(mean, std=None) -> str:
    if not math.isfinite(mean):
        return ""
    return f"{mean:.1f}" if std is None else f"{mean:.1f} ± {std:.1f}"


@dataclass
class CrossValReport:
    """Per-fold and aggregated results of a cross-validation run.

    The aggregated row is computed over all model samples of all folds.
    """

    notation: str
    repeats: int
    pairing: str
    config: TrainConfig
    folds: list
    model_paths: dict = field(default_factory=dict)

    @property
    def heads(self) -> tuple:
        """Head keys."""
        return head_keys(self.notation)

    @property
    def columns(self) -> list:
        """Metric columns of the tables."""
        return _columns(self.heads)

    def average_rows(self) -> list:
        """``(edition, {column: (mean, std)})`` per fold plus the aggregate."""
        rows = []
        pooled = {c: [] for c in self.columns}
        for fold in self.folds:
            samples = _samples(fold)
            stats = {c: mean_std(samples[c]) for c in self.columns}
            rows.append((fold.edition, stats))
            for c in self.columns:
                pooled[c].extend(samples[c])
        rows.append((AGGREGATE_ROW, {c: mean_std(pooled[c]) for c in self.columns}))
        return rows

    def best_rows(self) -> list:
        """``(edition, {column: value})`` of the best models per fold."""
        return [(fold.edition, _best_values(fold)) for fold in self.folds]

    def to_dict(self) -> dict:
        """JSON-compatible report."""
        return {
            "notation": self.notation,
            "repeats": self.repeats,
            "pairing": self.pairing,
            "config": self.config.to_dict(),
            "model_samples": sum(len(f.joint) for f in self.folds),
            "average": [
                {
                    "edition": e,
                    **{c: [_clean(m), _clean(s)] for c, (m, s) in v.items()},
                }
                for e, v in self.average_rows()
            ],
            "best": [
                {"edition": e, **{c: _clean(x) for c, x in v.items()}}
                for e, v in self.best_rows()
            ],
            "folds": [f.to_dict() for f in self.folds],
            "audit": [f.audit.to_dict() for f in self.folds],
            "model_paths": {
                k: [str(p) for p in v] for k, v in self.model_paths.items()
            },
        }

    def to_json(self, path):
        """Write :meth:`to_dict` as JSON."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_tables(self, out_dir) -> list:
        """Write ``table_average.csv`` and ``table_best.csv``.

        Rows are the held-out editions; the average table adds the aggregated
        row and formats cells as ``mean ± std`` in percent, the best table
        adds the mean ± std of the best models over the folds.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        average = out_dir / "table_average.csv"
        with open(average, "w", newline="", encoding="utf-8") as fid:
            writer = csv.writer(fid)
            writer.writerow(["edition", *self.columns])
            for edition, values in self.average_rows():
                writer.writerow([edition, *(_fmt(*values[c]) for c in self.columns)])
        best = out_dir / "table_best.csv"
        rows = self.best_rows()
        with open(best, "w", newline="", encoding="utf-8") as fid:
            writer = csv.writer(fid)
            writer.writerow(["edition", *self.columns])
            for edition, values in rows:
                writer.writerow([edition, *(_fmt(values[c]) for c in self.columns)])
            writer.writerow(
                [
                    AGGREGATE_ROW,
                    *(
                        _fmt(*mean_std([v[c] for _, v in rows]))
                        for c in self.columns
                    ),
                ]
            )
        return [average, best]


def _train_repeat(task, ctx) -> ModelRecord:
    fold_idx, edition, h_idx, head, repeat = task
    base = ctx["config"]
    config = replace(base, seed=derive_seed(base.seed, fold_idx, h_idx, repeat))
    params, _ = train_model(ctx["archs"][head], ctx["train"], ctx["val"], config, head)
    test = evaluate(params, ctx["test"], key=head, tensors=ctx["test_x"])
    test_logits, test_targets = test.logits[head], test.targets[head]
    record = ModelRecord(
        edition,
        head,
        repeat,
        config.seed,
        math.nan,
        math.nan,
        test.head_accuracy[head],
        params=params,
        val_hits=np.zeros(0, dtype=bool),
        test_hits=np.argmax(test_logits, axis=1) == test_targets,
        test_logits=test_logits,
        test_targets=test_targets,
    )
    if ctx["val"]:
        val = evaluate(params, ctx["val"], key=head, tensors=ctx["val_x"])
        val_logits, val_targets = val.logits[head], val.targets[head]
        record.val_acc = val.head_accuracy[head]
        record.val_loss = focal_loss(val_logits, val_targets, config.focal_gamma)[0]
        record.val_hits = np.argmax(val_logits, axis=1) == val_targets
        try:
            record.calibration = calibrate(
                val_logits, val_targets, test_logits, test_targets
            )
        except DataError as err:
            logger.info("No temperature for %s/%s #%d: %s", edition, head, repeat, err)
    logger.info(
        "Fold %s, %s model %d: val %.2f%%, test %.2f%%",
        edition,
        head,
        repeat + 1,
        record.val_acc,
        record.test_acc,
    )
    return record


def _joint_samples(models, heads, pairing) -> list:
    if len(heads) == 1:
        return [(m.val_acc, m.test_acc) for m in models[heads[0]]]
    first, second = models[heads[0]], models[heads[1]]
    if pairing == "paired":
        pairs = list(zip(first, second))
    else:
        pairs = [(a, b) for a in first for b in second]
    samples = []
    for a, b in pairs:
        val = (
            100.0 * float(np.mean(a.val_hits & b.val_hits))
            if a.val_hits.size
            else math.nan
        )
        samples.append((val, 100.0 * float(np.mean(a.test_hits & b.test_hits))))
    return samples


def _run_fold(fold_idx, edition, corpus, config, archs, repeats, pairing, pool, split):
    heads = head_keys(corpus.notation)
    test = corpus.by_edition(edition)
    real = [
        inst
        for inst in corpus.trainable()
        if inst.edition not in (edition, ARTIFICIAL_EDITION)
    ]
    if not real:
        raise DataError(f"No training instances remain when holding out {edition}.")
    train, val = stratified_split(real, split, derive_seed(config.seed, fold_idx))
    artificial = corpus.by_edition(ARTIFICIAL_EDITION)
    train += [inst for inst in artificial if not inst.excluded]
    audit = FoldAudit(
        edition,
        tuple(i.id for i in train),
        tuple(i.id for i in val),
        tuple(i.id for i in test),
    )
    audit.check()
    logger.info(
        "Fold %s: %d train, %d val, %d test instances",
        edition,
        len(train),
        len(val),
        len(test),
    )
    ctx = {
        "config": config,
        "archs": archs,
        "train": train,
        "val": val,
        "test": test,
        "val_x": eval_tensors(val, config.augment),
        "test_x": eval_tensors(test, config.augment),
    }
    tasks = [
        (fold_idx, edition, h_idx, head, r)
        for h_idx, head in enumerate(heads)
        for r in range(repeats)
    ]
    records = list(pool.map(lambda task: _train_repeat(task, ctx), tasks))
    models = {h: [m for m in records if m.head == h] for h in heads}
    best = {h: min(models[h], key=ModelRecord.selection_key) for h in heads}

    if len(heads) > 1:
        best_model = FactoredClassifier(best["pitch"].params, best["secondary"].params)
    else:
        best_model = best[heads[0]].params
    best_report = evaluate(best_model, test, tensors=ctx["test_x"])
    if len(heads) > 1:
        a, b = best["pitch"], best["secondary"]
        val_joint = (
            100.0 * float(np.mean(a.val_hits & b.val_hits))
            if a.val_hits.size
            else math.nan
        )
        best_joint = (val_joint, best_report.joint_accuracy)
        best_joint_ece = _pair_ece(a, b)
    else:
        best_joint = (best[heads[0]].val_acc, best_report.joint_accuracy)
        best_joint_ece = None
    for records_ in models.values():
        for m in records_:
            if m is not best[m.head]:
                m.params = None
    fold = FoldResult(
        edition,
        audit,
        models,
        _joint_samples(models, heads, pairing),
        best,
        best_joint,
        best_report,
        best_joint_ece,
    )
    logger.info(
        "Fold %s done: best test accuracy %.2f%%, CER %.2f%%",
        edition,
        best_report.joint_accuracy,
        best_report.cer,
    )
    return fold


def _pair_ece(a: ModelRecord, b: ModelRecord):
    ta = a.calibration.temperature if a.calibration else 1.0
    tb = b.calibration.temperature if b.calibration else 1.0
    before = joint_ece(
        apply_temperature(a.test_logits, 1.0),
        apply_temperature(b.test_logits, 1.0),
        a.test_targets,
        b.test_targets,
    )
    after = joint_ece(
        apply_temperature(a.test_logits, ta),
        apply_temperature(b.test_logits, tb),
        a.test_targets,
        b.test_targets,
    )
    return before, after


def cross_validate(
    corpus: Corpus,
    config: TrainConfig,
    repeats: int = 10,
    archs: Optional[dict] = None,
    pairing: str = "all",
    threads: int = 1,
    train_fraction: float = 0.75,
    editions: Optional[Sequence[str]] = None,
    save_dir=None,
) -> CrossValReport:
    """Leave-one-edition-out cross-validation.

    Parameters
    ----------
    corpus : Corpus
        Instances of at least two editions; ``"artificial"`` instances join
        every training set and are never a fold.
    config : TrainConfig
        Training hyperparameters; ``config.seed`` roots every derived seed.
    repeats : int
        Models trained per head and fold.
    archs : dict, optional
        Head key to :class:`~glyphforge.model.ArchSpec`.
    pairing : str
        ``"all"`` evaluates every pitch/secondary combination of a suzipu
        fold, ``"paired"`` only the repeats with equal index.
    threads : int
        Worker threads training repeats concurrently. Results do not depend
        on it.
    train_fraction : float
        Share of each class used for training.
    editions : sequence of str, optional
        Held-out editions, in order; every non-artificial edition by default.
    save_dir : str | pathlib.Path, optional
        Where to write ``<edition>/<head>.glyf`` for the best models.

    Returns
    -------
    report : CrossValReport
    """
    if repeats < 1:
        raise UsageError(f"repeats must be >= 1, got {repeats}.")
    if pairing not in PAIRINGS:
        raise UsageError(f"pairing must be one of {PAIRINGS}, got {pairing!r}.")
    if threads < 1:
        raise UsageError(f"threads must be >= 1, got {threads}.")
    heads = head_keys(corpus.notation)
    archs = {h: (archs or {}).get(h) or default_arch(h) for h in heads}
    if editions is None:
        editions = [e for e in corpus.editions if e != ARTIFICIAL_EDITION]
    editions = list(editions)
    if len(editions) < 2:
        raise DataError(
            f"Cross-validation needs at least two editions, got {editions}."
        )
    for edition in editions:
        if edition == ARTIFICIAL_EDITION or not corpus.by_edition(edition):
            raise DataError(f"Edition {edition!r} has no instances to test on.")

    folds = []
    with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=threads) as pool:
        for fold_idx, edition in enumerate(editions):
            folds.append(
                _run_fold(
                    fold_idx,
                    edition,
                    corpus,
                    config,
                    archs,
                    repeats,
                    pairing,
                    pool,
                    train_fraction,
                )
            )
    report = CrossValReport(corpus.notation, repeats, pairing, config, folds)
    if save_dir is not None:
        report.model_paths = save_best_models(report, save_dir)
    return report


def save_best_models(report: CrossValReport, out_dir) -> dict:
    """Write the best model of every fold and head as ``<edition>/<head>.glyf``."""
    paths = {}
    for fold in report.folds:
        directory = Path(out_dir) / fold.edition
        directory.mkdir(parents=True, exist_ok=True)
        paths[fold.edition] = []
        for head, record in fold.best.items():
            path = directory / f"{head}.glyf"
            save_classifier(path, record.params)
            paths[fold.edition].append(path)
    return paths


def scaled_batches(batches: int, n_real: int, n_extra: int) -> int:
    """Batches per epoch after enlarging a pool of ``n_real`` by ``n_extra``."""
    if n_real < 1:
        raise DataError("The real training pool is empty.")
    return math.ceil(batches * (n_real + n_extra) / n_real)


def compare_artificial(
    corpus: Corpus,
    artificial_dir,
    config: TrainConfig,
    repeats: int = 10,
    artificial_config: Optional[TrainConfig] = None,
    **kwargs,
):
    """Cross-validate without and with artificial training samples.

    Parameters
    ----------
    corpus : Corpus
        Real instances.
    artificial_dir : str | pathlib.Path
        Artificial samples, see :func:`~glyphforge.data.merge_artificial`.
    config : TrainConfig
        Configuration of the run without artificial data.
    repeats : int
        Models per head and fold.
    artificial_config : TrainConfig, optional
        Configuration of the run with artificial data. By default ``config``
        with the batches per epoch scaled to the enlarged pool.
    **kwargs
        Passed to :func:`cross_validate`.

    Returns
    -------
    plain : CrossValReport
    artificial : CrossValReport
    """
    merged = merge_artificial(corpus, artificial_dir)
    if artificial_config is None:
        n_extra = len(merged) - len(corpus)
        artificial_config = replace(
            config,
            batches_per_epoch=scaled_batches(
                config.batches_per_epoch, len(corpus.trainable()), n_extra
            ),
        )
    plain = cross_validate(corpus, config, repeats, **kwargs)
    artificial = cross_validate(merged, artificial_config, repeats, **kwargs)
    return plain, artificial


def write_comparison_table(path, plain: CrossValReport, artificial: CrossValReport):
    """One table comparing runs without and with artificial samples.

    Columns hold validation accuracy, test accuracy and CER of both runs; the
    mean ± std rows come first, followed by the best-model rows.
    """
    metrics = [("val", "val_total"), ("test", "test_total"), ("cer", "cer")]
    if len(plain.heads) == 1:
        head = plain.heads[0]
        metrics[:2] = [("val", f"val_{head}"), ("test", f"test_{head}")]
    header = ["edition", "statistic"]
    for name, _ in metrics:
        header += [f"{name}_non_art", f"{name}_art"]
    with open(path, "w", newline="", encoding="utf-8") as fid:
        writer = csv.writer(fid)
        writer.writerow(header)
        averages = zip(plain.average_rows(), artificial.average_rows())
        for (edition, a), (_, b) in averages:
            row = [edition, "mean ± std"]
            for _, col in metrics:
                row += [_fmt(*a[col]), _fmt(*b[col])]
            writer.writerow(row)
        for (edition, a), (_, b) in zip(plain.best_rows(), artificial.best_rows()):
            row = [edition, "best"]
            for _, col in metrics:
                row += [_fmt(a[col]), _fmt(b[col])]
            writer.writerow(row)
    return Path(path)


__all__ = [
    "CrossValReport",
    "FoldAudit",
    "FoldResult",
    "ModelRecord",
    "compare_artificial",
    "cross_validate",
    "mean_std",
    "save_best_models",
    "scaled_batches",
    "write_comparison_table",
]
