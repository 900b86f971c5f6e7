import csv
import json

import pytest

from ..cli import glyphforge as cli
from ..cli import run
from ..cli.glyphforge import resolve_threads
from ..utils import UsageError

TRAIN_FLAGS = ["--epochs", "1", "--batches", "1", "--batch-size", "8"]


def _artifacts(out):
    return json.loads((out / "artifacts.json").read_text())


@pytest.fixture(scope="module")
def lvlv_run(tmp_path_factory):
    """A small synthetic lülüpu corpus and a model trained on it."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    result = run(
        ["synth", "--notation", "lvlvpu", "--per-class", "3", "--editions", "3"]
        + ["--seed", "7", "--out", str(data)]
    )
    assert result.exit_code == 0
    model_dir = root / "model"
    result = run(
        ["train", "--corpus", str(data / "corpus.json"), "--seed", "1"]
        + ["--out", str(model_dir)]
        + TRAIN_FLAGS
    )
    assert result.exit_code == 0
    return data / "corpus.json", model_dir


def test_no_arguments(capsys):
    assert run([]).exit_code == 1
    assert "[ERROR]" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run(["synth", "--bogus"]).exit_code == 1
    assert run(["nonsense", "--seed", "1", "--out", str(tmp_path)]).exit_code == 1
    assert run(["synth", "--notation", "lvlvpu", "--per-class", "2"]).exit_code == 1
    assert "[ERROR]" in capsys.readouterr().err


def test_version():
    assert run(["--version"]).exit_code == 0


def test_synth_writes_corpus(tmp_path):
    """20 instances of each of the 17 classes plus the bookkeeping files."""
    out = tmp_path / "synth"
    result = run(
        ["synth", "--notation", "lvlvpu", "--per-class", "20", "--seed", "7"]
        + ["--out", str(out)]
    )
    assert result.exit_code == 0
    assert len(list((out / "images").glob("*.png"))) == 340
    listed = _artifacts(out)
    assert listed["command"] == "synth"
    assert "corpus.json" in listed["artifacts"]
    assert "profiles.json" in listed["artifacts"]
    assert len(listed["artifacts"]) == 342
    assert result.artifacts[-1] == out / "artifacts.json"


def test_bad_manifest_is_a_data_error(tmp_path, capsys):
    manifest = tmp_path / "corpus.json"
    manifest.write_text('{"version": 1, "notation": "lvlvpu", "instances": [{}]}')
    result = run(
        ["eval", "--corpus", str(manifest), "--model", str(tmp_path)]
        + ["--seed", "0", "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 2
    assert "[ERROR]" in capsys.readouterr().err


def test_notation_mismatch(lvlv_run, tmp_path):
    corpus, model_dir = lvlv_run
    result = run(
        ["eval", "--corpus", str(corpus), "--notation", "suzipu"]
        + ["--model", str(model_dir), "--seed", "0", "--out", str(tmp_path)]
    )
    assert result.exit_code == 2


def test_train_outputs(lvlv_run):
    _, model_dir = lvlv_run
    assert (model_dir / "lvlv.glyf").is_file()
    assert (model_dir / "history_lvlv.csv").is_file()
    config = json.loads((model_dir / "config.json").read_text())
    assert config["epochs"] == 1
    assert config["seed"] == 1
    assert config["augment"]["resize_min"] == 33
    assert sorted(_artifacts(model_dir)["artifacts"]) == [
        "config.json",
        "history_lvlv.csv",
        "lvlv.glyf",
    ]


def test_eval_predict_retrieve_calibrate(lvlv_run, tmp_path):
    """The trained model flows through every downstream command."""
    corpus, model_dir = lvlv_run
    common = ["--corpus", str(corpus), "--model", str(model_dir), "--seed", "0"]

    out = tmp_path / "eval"
    assert run(["eval", *common, "--out", str(out)]).exit_code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["n_instances"] == 51
    assert (out / "per_class_lvlv.csv").is_file()

    out = tmp_path / "eval_lu"
    assert run(["eval", *common, "--edition", "Lu", "--out", str(out)]).exit_code == 0
    assert json.loads((out / "report.json").read_text())["n_instances"] == 17

    cal = tmp_path / "calibrate"
    assert run(["calibrate", *common, "--out", str(cal)]).exit_code == 0
    payload = json.loads((cal / "calibration.json").read_text())
    assert payload["heads"]["lvlv"]["temperature"] > 0
    assert "joint_ece" not in payload

    out = tmp_path / "predict"
    result = run(
        ["predict", *common, "--calibration", str(cal / "calibration.json")]
        + ["--out", str(out)]
    )
    assert result.exit_code == 0
    with open(out / "predictions.csv") as fid:
        rows = list(csv.reader(fid))
    assert rows[0] == ["id", "lvlv", "lvlv_confidence"]
    assert len(rows) == 52
    assert all(0.0 < float(r[2]) <= 1.0 for r in rows[1:])

    out = tmp_path / "retrieve"
    assert run(["retrieve", *common, "-k", "2", "--out", str(out)]).exit_code == 0
    with open(out / "neighbors.csv") as fid:
        rows = list(csv.reader(fid))
    assert rows[0] == ["query", "rank", "neighbor", "distance", "edition", "label"]
    assert len(rows) == 1 + 51 * 2
    assert all(r[0] != r[2] for r in rows[1:])


def test_predict_needs_input(lvlv_run, tmp_path):
    _, model_dir = lvlv_run
    result = run(
        ["predict", "--model", str(model_dir), "--seed", "0", "--out", str(tmp_path)]
    )
    assert result.exit_code == 1


def test_gradcheck_command(tmp_path):
    out = tmp_path / "grad"
    result = run(["gradcheck", "--seeds", "1", "--seed", "3", "--out", str(out)])
    assert result.exit_code == 0
    payload = json.loads((out / "gradcheck.json").read_text())
    assert set(payload["checks"]) >= {"conv2d", "batchnorm2d", "focal_loss", "model"}
    assert all(c["passed"] for c in payload["checks"].values())


def test_gradcheck_failure_exit_code(tmp_path, monkeypatch):
    """A failing check is a numeric error that still leaves its report."""
    failing = {"relu": {"max_error": 0.5, "tolerance": 1e-4, "passed": False}}
    monkeypatch.setattr(cli, "gradient_suite", lambda seeds, epsilon: failing)
    out = tmp_path / "grad"
    result = run(["gradcheck", "--seeds", "1", "--seed", "0", "--out", str(out)])
    assert result.exit_code == 3
    assert _artifacts(out)["artifacts"] == ["gradcheck.json"]


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv("GLYPH_FORGE_THREADS", raising=False)
    assert resolve_threads() == 1
    assert resolve_threads(3) == 3
    monkeypatch.setenv("GLYPH_FORGE_THREADS", "4")
    assert resolve_threads() == 4
    assert resolve_threads(2) == 2
    monkeypatch.setenv("GLYPH_FORGE_THREADS", "many")
    with pytest.raises(UsageError):
        resolve_threads()
    with pytest.raises(UsageError):
        resolve_threads(0)


def test_bench_command(tmp_path, monkeypatch):
    """Timings come with the machine they were measured on."""
    monkeypatch.delenv("GLYPH_FORGE_THREADS", raising=False)
    out = tmp_path / "bench"
    result = run(
        ["bench", "--size", "20", "--repeats", "1", "--seed", "0", "--out", str(out)]
    )
    assert result.exit_code == 0
    payload = json.loads((out / "bench.json").read_text())
    assert payload["n_instances"] == 20
    assert payload["threads"] == 1
    assert payload["std_seconds"] == 0.0
    assert payload["machine"]["logical_cores"] >= 1
    assert "Platform:" in (out / "sys_info.txt").read_text()


def test_unreadable_side_files_are_data_errors(lvlv_run, tmp_path, capsys):
    """Missing or malformed --config, --calibration, --profiles and --model exit 2."""
    corpus, model_dir = lvlv_run
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    missing = tmp_path / "absent.json"
    common = ["--seed", "1", "--out", str(tmp_path / "out")]
    for config in (missing, broken):
        result = run(
            ["train", "--corpus", str(corpus), "--config", str(config)] + common
        )
        assert result.exit_code == 2
    for calibration in (missing, broken):
        result = run(
            ["predict", "--corpus", str(corpus), "--model", str(model_dir)]
            + ["--calibration", str(calibration)]
            + common
        )
        assert result.exit_code == 2
    for profiles in (missing, broken):
        result = run(
            ["synth", "--notation", "lvlvpu", "--per-class", "1"]
            + ["--profiles", str(profiles)]
            + common
        )
        assert result.exit_code == 2
    result = run(
        ["eval", "--corpus", str(corpus), "--model", str(tmp_path / "none.glyf")]
        + common
    )
    assert result.exit_code == 2
    err = capsys.readouterr().err
    assert err.count("[ERROR]") == 7
    assert "Traceback" not in err


@pytest.mark.slow
def test_crossval_reruns_are_byte_identical(tmp_path, monkeypatch):
    """Two cross-validation runs with one seed write the same bytes."""
    monkeypatch.delenv("GLYPH_FORGE_THREADS", raising=False)
    data = tmp_path / "data"
    result = run(
        ["synth", "--notation", "lvlvpu", "--per-class", "6", "--editions", "3"]
        + ["--seed", "2", "--out", str(data)]
    )
    assert result.exit_code == 0
    outs = [tmp_path / "first", tmp_path / "second"]
    for out in outs:
        result = run(
            ["crossval", "--corpus", str(data / "corpus.json"), "--repeats", "1"]
            + ["--seed", "4", "--out", str(out)]
            + TRAIN_FLAGS
        )
        assert result.exit_code == 0
    listed = _artifacts(outs[0])["artifacts"]
    assert listed == _artifacts(outs[1])["artifacts"]
    assert {"crossval.json", "table_average.csv", "table_best.csv"} <= set(listed)
    assert any(name.endswith(".glyf") for name in listed)
    for name in listed + ["artifacts.json"]:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
