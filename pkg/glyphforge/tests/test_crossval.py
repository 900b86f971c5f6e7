import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from ..crossval import (
    AGGREGATE_ROW,
    FoldAudit,
    compare_artificial,
    cross_validate,
    mean_std,
    save_best_models,
    scaled_batches,
    write_comparison_table,
)
from ..data import gen_synthetic_corpus, write_corpus
from ..model import ArchSpec, load_classifier
from ..train import TrainConfig
from ..utils import DataError, UsageError

TINY = dict(conv_channels=(2, 2, 2), fc1_width=8)
LVLV_ARCHS = {"lvlv": ArchSpec(n_classes=17, **TINY)}
SUZIPU_ARCHS = {
    "pitch": ArchSpec(n_classes=11, **TINY),
    "secondary": ArchSpec(n_classes=7, **TINY),
}


def _config(**overrides):
    values = dict(epochs=1, batches_per_epoch=1, batch_size=8, seed=5)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def lvlv_corpus():
    # two instances per class and edition
    return gen_synthetic_corpus("lvlvpu", 6, n_editions=3, seed=0)


@pytest.fixture(scope="module")
def lvlv_report(lvlv_corpus):
    return cross_validate(lvlv_corpus, _config(), repeats=2, archs=LVLV_ARCHS)


def test_mean_std():
    assert mean_std([90.0]) == (90.0, 0.0)
    mean, std = mean_std([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert std == pytest.approx(1.0)
    assert all(np.isnan(mean_std([])))


def test_scaled_batches():
    """86 extra instances on a pool of 2000 turn 21 batches into 22."""
    assert scaled_batches(21, 2000, 86) == 22
    assert scaled_batches(21, 2000, 0) == 21
    with pytest.raises(DataError):
        scaled_batches(21, 0, 86)


def test_fold_audit_detects_leaks():
    FoldAudit("Lu", ("a",), ("b",), ("c",)).check()
    with pytest.raises(DataError):
        FoldAudit("Lu", ("a", "c"), ("b",), ("c",)).check()


def test_crossval_structure(lvlv_corpus, lvlv_report):
    """One fold per edition, with disjoint splits and per-repeat seeds."""
    report = lvlv_report
    assert [f.edition for f in report.folds] == ["Lu", "Zhang", "Siku"]
    assert report.columns == ["val_lvlv", "test_lvlv", "cer"]
    for fold in report.folds:
        audit = fold.audit
        held_out = lvlv_corpus.by_edition(fold.edition)
        assert set(audit.test_ids) == {i.id for i in held_out}
        assert not set(audit.train_ids) & set(audit.val_ids)
        assert len(audit.train_ids) == 17 * 3 and len(audit.val_ids) == 17
        records = fold.models["lvlv"]
        assert [m.repeat for m in records] == [0, 1]
        assert records[0].seed != records[1].seed
        assert all(m.calibration is not None for m in records)
        assert len(fold.joint) == 2
        assert fold.best["lvlv"].params is not None
        assert sum(m.params is not None for m in records) == 1
        assert fold.best_report.n_instances == 34
    seeds = [m.seed for f in report.folds for m in f.models["lvlv"]]
    assert len(set(seeds)) == len(seeds)


def test_crossval_rows_and_tables(lvlv_report, tmp_path):
    rows = lvlv_report.average_rows()
    assert [e for e, _ in rows] == ["Lu", "Zhang", "Siku", AGGREGATE_ROW]
    pooled = [100.0 - t for f in lvlv_report.folds for _, t in f.joint]
    assert rows[-1][1]["cer"] == pytest.approx(mean_std(pooled))
    paths = lvlv_report.write_tables(tmp_path)
    assert [p.name for p in paths] == ["table_average.csv", "table_best.csv"]
    with open(paths[0], encoding="utf-8") as fid:
        average = list(csv.reader(fid))
    assert average[0] == ["edition", "val_lvlv", "test_lvlv", "cer"]
    assert len(average) == 5
    assert " ± " in average[-1][3]
    with open(paths[1], encoding="utf-8") as fid:
        best = list(csv.reader(fid))
    assert [r[0] for r in best[1:]] == ["Lu", "Zhang", "Siku", AGGREGATE_ROW]

    payload = json.loads(json.dumps(lvlv_report.to_dict()))
    assert payload["model_samples"] == 6
    assert len(payload["audit"]) == 3
    assert "ece_max_after" in payload["folds"][0]


def test_crossval_is_deterministic(lvlv_corpus, lvlv_report):
    """Worker threads do not change any result."""
    threaded = cross_validate(
        lvlv_corpus, _config(), repeats=2, archs=LVLV_ARCHS, threads=2
    )
    assert json.dumps(threaded.to_dict(), sort_keys=True) == json.dumps(
        lvlv_report.to_dict(), sort_keys=True
    )


def test_save_best_models(lvlv_report, tmp_path):
    paths = save_best_models(lvlv_report, tmp_path)
    assert sorted(paths) == ["Lu", "Siku", "Zhang"]
    params = load_classifier(paths["Lu"][0])
    assert paths["Lu"][0].name == "lvlv.glyf"
    assert params.arch == LVLV_ARCHS["lvlv"]


@pytest.mark.parametrize("pairing, samples", [("all", 4), ("paired", 2)])
def test_suzipu_pairing(pairing, samples):
    """Factored folds combine the heads' repeats."""
    corpus = gen_synthetic_corpus("suzipu", 2, n_editions=2, seed=1)
    report = cross_validate(
        corpus, _config(), repeats=2, archs=SUZIPU_ARCHS, pairing=pairing
    )
    assert report.columns == [
        "val_pitch",
        "val_secondary",
        "val_total",
        "test_pitch",
        "test_secondary",
        "test_total",
        "cer",
    ]
    for fold in report.folds:
        assert set(fold.models) == {"pitch", "secondary"}
        assert len(fold.joint) == samples
        assert fold.best_joint_ece is not None
        assert fold.best_joint[1] == fold.best_report.joint_accuracy


def test_crossval_errors(lvlv_corpus):
    with pytest.raises(UsageError):
        cross_validate(lvlv_corpus, _config(), repeats=0)
    with pytest.raises(UsageError):
        cross_validate(lvlv_corpus, _config(), pairing="random")
    with pytest.raises(UsageError):
        cross_validate(lvlv_corpus, _config(), threads=0)
    with pytest.raises(DataError):
        cross_validate(lvlv_corpus, _config(), editions=["Lu"])
    with pytest.raises(DataError):
        cross_validate(lvlv_corpus, _config(), editions=["Lu", "Zhu"])


def test_compare_artificial(lvlv_corpus, tmp_path):
    """Artificial samples only ever join the training sets."""
    extra = gen_synthetic_corpus("lvlvpu", 1, n_editions=1, seed=9)
    extra = extra.with_instances(
        replace(inst, id=f"art-{inst.id}", edition="artificial") for inst in extra
    )
    write_corpus(extra, tmp_path / "artificial")
    plain, artificial = compare_artificial(
        lvlv_corpus, tmp_path / "artificial", _config(), repeats=1, archs=LVLV_ARCHS
    )
    assert artificial.config.batches_per_epoch == scaled_batches(1, 102, 17)
    art_ids = {inst.id for inst in extra}
    for fold in artificial.folds:
        assert art_ids <= set(fold.audit.train_ids)
        assert not art_ids & set(fold.audit.test_ids)
        assert not art_ids & set(fold.audit.val_ids)
    assert [f.edition for f in artificial.folds] == [f.edition for f in plain.folds]

    path = write_comparison_table(tmp_path / "table_artificial.csv", plain, artificial)
    with open(path, encoding="utf-8") as fid:
        rows = list(csv.reader(fid))
    assert rows[0] == [
        "edition",
        "statistic",
        "val_non_art",
        "val_art",
        "test_non_art",
        "test_art",
        "cer_non_art",
        "cer_art",
    ]
    assert [r[1] for r in rows[1:]] == ["mean ± std"] * 4 + ["best"] * 3


@pytest.mark.slow
def test_outlier_edition_is_hardest():
    """Regular folds reach 90% while the distribution-shifted one lags."""
    corpus = gen_synthetic_corpus("lvlvpu", 40, n_editions=5, seed=7)
    config = TrainConfig.for_notation(
        "lvlvpu", epochs=15, batches_per_epoch=8, seed=7
    )
    report = cross_validate(corpus, config, repeats=3)
    test_acc = {
        edition: stats["test_lvlv"][0] for edition, stats in report.average_rows()
    }
    del test_acc[AGGREGATE_ROW]
    regular = {e: a for e, a in test_acc.items() if e != "Zhu"}
    assert min(regular.values()) >= 90.0
    assert test_acc["Zhu"] < min(regular.values())
