#!/usr/bin/python3

"""
Command line interface of glyphforge.

Every subcommand writes its results below ``--out`` together with an
``artifacts.json`` listing the files it produced, and every source of
randomness derives from ``--seed``.

Usage:
    $ glyphforge synth --notation lvlvpu --per-class 20 --seed 7 --out data/
    $ glyphforge crossval --corpus data/corpus.json --repeats 2 --seed 1 --out r/

(See ``glyphforge <command> --help`` for the flags of each command.)
"""

import argparse
import csv
import json
import math
import os
import sys
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import __version__
from ..calibrate import apply_temperature, calibrate, joint_ece, write_bins_csv
from ..crossval import (
    compare_artificial,
    cross_validate,
    save_best_models,
    write_comparison_table,
)
from ..data import (
    ARTIFICIAL_EDITION,
    NOTATIONS,
    AugmentSpec,
    eval_tensors,
    eval_transform,
    gen_synthetic_corpus,
    head_keys,
    load_corpus,
    merge_artificial,
    read_image,
    stratified_split,
    vocabulary,
    write_corpus,
)
from ..gradcheck import gradient_suite
from ..metrics import benchmark_inference, evaluate, infer_key, model_heads
from ..model import (
    MODEL_SUFFIX,
    FactoredClassifier,
    build_classifier,
    load_classifier,
    predict_logits,
    save_classifier,
)
from ..profiles import (
    ImbalanceProfile,
    default_profiles,
    load_profiles,
    save_profiles,
)
from ..retrieval import all_neighbors, build_feature_index, query_knn
from ..train import TrainConfig, default_arch, derive_seed, train_factored, train_model
from ..utils import (
    DataError,
    GlyphForgeError,
    NumericError,
    UsageError,
    VocabularyMismatchError,
    add_stream_handler,
    logger,
    machine_info,
    set_log_level,
    sys_info,
)

THREADS_ENV = "GLYPH_FORGE_THREADS"
ARTIFACTS_NAME = "artifacts.json"
VERBOSITY = ("warning", "info", "debug")


@dataclass
class CommandResult:
    """Outcome of one invocation.

    Attributes
    ----------
    exit_code : int
        0 on success, 1 usage error, 2 data error, 3 numeric failure.
    artifacts : list of pathlib.Path
        Files written, ``artifacts.json`` last.
    summary : str
        One-line description of the outcome.
    """

    exit_code: int
    artifacts: list = field(default_factory=list)
    summary: str = ""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_threads(threads=None) -> int:
    """Thread count from the flag, then ``GLYPH_FORGE_THREADS``, then 1."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return 1
        try:
            threads = int(env)
        except ValueError as err:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}.") from err
    if threads < 1:
        raise UsageError(f"The thread count must be >= 1, got {threads}.")
    return threads


# -- shared helpers -----------------------------------------------------------


def _load_corpus(args):
    corpus = load_corpus(args.corpus, denoise=args.denoise)
    notation = getattr(args, "notation", None)
    if notation is not None and notation != corpus.notation:
        raise VocabularyMismatchError(
            f"--notation {notation} does not match the {corpus.notation} corpus."
        )
    return corpus


def _load_model(path):
    """A ``.glyf`` head, or a directory holding one or two heads."""
    path = Path(path)
    if path.is_dir():
        if (path / f"pitch{MODEL_SUFFIX}").exists():
            return FactoredClassifier.load(path)
        heads = sorted(path.glob(f"*{MODEL_SUFFIX}"))
        if len(heads) != 1:
            raise DataError(f"Expected one model file in {path}, found {len(heads)}.")
        return load_classifier(heads[0])
    return load_classifier(path)


def _notation_of(model) -> str:
    if isinstance(model, FactoredClassifier):
        return "suzipu"
    return "lvlvpu" if infer_key(model) == "lvlv" else "suzipu"


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return Path(path)


def _train_config(args, notation, artificial=False) -> TrainConfig:
    flags = {
        "epochs": args.epochs,
        "batches_per_epoch": args.batches,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "focal_gamma": args.gamma,
        "plateau_patience": args.patience,
    }
    augment = {"resize_min": args.resize_min, "resize_max": args.resize_max}
    if args.config is not None:
        base = TrainConfig.from_json(args.config)
        return replace(
            base,
            seed=args.seed,
            augment=replace(
                base.augment, **{k: v for k, v in augment.items() if v is not None}
            ),
            **{k: v for k, v in flags.items() if v is not None},
        )
    return TrainConfig.for_notation(
        notation,
        artificial,
        seed=args.seed,
        augment=AugmentSpec.for_notation(notation, **augment),
        **flags,
    )


def _write_per_class(path, scores):
    with open(path, "w", newline="") as fid:
        writer = csv.writer(fid)
        writer.writerow(["label", "precision", "recall", "f1", "support"])
        for s in scores:
            writer.writerow(
                [s.label, repr(s.precision), repr(s.recall), repr(s.f1), s.support]
            )
    return Path(path)


# -- subcommands --------------------------------------------------------------


def cmd_synth(args, out):
    """Render a synthetic corpus."""
    if args.profiles is not None:
        editions, _ = load_profiles(args.profiles)
    else:
        editions, _ = default_profiles(args.seed)
    imbalance = ImbalanceProfile(args.imbalance, args.ratio)
    corpus = gen_synthetic_corpus(
        args.notation,
        args.per_class,
        n_editions=args.editions,
        seed=args.seed,
        imbalance=imbalance,
        editions=editions,
    )
    artifacts = write_corpus(corpus, out)
    save_profiles(out / "profiles.json", editions[: args.editions], imbalance)
    artifacts.append(out / "profiles.json")
    logger.info("Corpus summary:\n%s", corpus.summary())
    return artifacts, f"Wrote {len(corpus)} {corpus.notation} instances to {out}."


def cmd_train(args, out):
    """Train the heads of one notation on a stratified split."""
    corpus = _load_corpus(args)
    notation = corpus.notation
    config = _train_config(args, notation, args.artificial is not None)
    train, val = stratified_split(
        corpus.trainable(), args.train_fraction, derive_seed(args.seed, 0)
    )
    if args.artificial is not None:
        merged = merge_artificial(corpus, args.artificial)
        train += [i for i in merged.by_edition(ARTIFICIAL_EDITION) if not i.excluded]
    artifacts = []
    if notation == "suzipu":
        model, histories = train_factored(train, val, config)
        artifacts += model.save(out)
    else:
        params, history = train_model(default_arch("lvlv"), train, val, config, "lvlv")
        histories = {"lvlv": history}
        path = out / f"lvlv{MODEL_SUFFIX}"
        save_classifier(path, params)
        artifacts.append(path)
    for head, history in histories.items():
        path = out / f"history_{head}.csv"
        history.to_csv(path)
        artifacts.append(path)
    config.to_json(out / "config.json")
    artifacts.append(out / "config.json")
    final = ", ".join(f"{h} {hist.val_acc[-1]:.2f}%" for h, hist in histories.items())
    return artifacts, f"Trained {notation} model; validation accuracy {final}."


def cmd_eval(args, out):
    """Evaluate a trained model on a corpus."""
    corpus = _load_corpus(args)
    instances = corpus.by_edition(args.edition) if args.edition else list(corpus)
    model = _load_model(args.model)
    report = evaluate(model, instances, AugmentSpec.for_notation(corpus.notation))
    artifacts = [_write_json(out / "report.json", report.to_dict())]
    for head, scores in report.per_class.items():
        artifacts.append(_write_per_class(out / f"per_class_{head}.csv", scores))
    return artifacts, (
        f"Accuracy {report.joint_accuracy:.2f}%, CER {report.cer:.2f}% on "
        f"{report.n_instances} instances."
    )


def cmd_crossval(args, out):
    """Leave-one-edition-out cross-validation."""
    corpus = _load_corpus(args)
    config = _train_config(args, corpus.notation)
    options = {
        "pairing": args.pairing,
        "threads": resolve_threads(args.threads),
        "train_fraction": args.train_fraction,
    }
    artifacts = []
    if args.artificial is None:
        report = cross_validate(corpus, config, args.repeats, **options)
    else:
        art_config = _train_config(args, corpus.notation, artificial=True)
        plain, report = compare_artificial(
            corpus,
            args.artificial,
            config,
            args.repeats,
            artificial_config=art_config,
            **options,
        )
        plain_dir = out / "without_artificial"
        plain_dir.mkdir(parents=True, exist_ok=True)
        plain.to_json(plain_dir / "crossval.json")
        artifacts.append(plain_dir / "crossval.json")
        artifacts += plain.write_tables(plain_dir)
        for paths in save_best_models(plain, plain_dir / "models").values():
            artifacts += paths
        artifacts.append(
            write_comparison_table(out / "table_artificial.csv", plain, report)
        )
    saved = save_best_models(report, out / "models")
    for paths in saved.values():
        artifacts += paths
    report.model_paths = {
        edition: [p.relative_to(out) for p in paths] for edition, paths in saved.items()
    }
    report.to_json(out / "crossval.json")
    artifacts.append(out / "crossval.json")
    artifacts += report.write_tables(out)
    _, aggregate = report.average_rows()[-1]
    cer, std = aggregate["cer"]
    return artifacts, (
        f"{len(report.folds)} folds x {args.repeats} repeats: aggregated CER "
        f"{cer:.1f} ± {std:.1f}%."
    )


def cmd_calibrate(args, out):
    """Fit temperatures on one corpus and report calibration."""
    corpus = _load_corpus(args)
    model = _load_model(args.model)
    spec = AugmentSpec.for_notation(corpus.notation)
    fit = evaluate(model, list(corpus), spec)
    test = None
    if args.test_corpus is not None:
        test = evaluate(model, list(load_corpus(args.test_corpus)), spec)
    reports = {}
    for head in fit.logits:
        reports[head] = calibrate(
            fit.logits[head],
            fit.targets[head],
            None if test is None else test.logits[head],
            None if test is None else test.targets[head],
        )
    payload = {"heads": {h: r.to_dict() for h, r in reports.items()}}
    if isinstance(model, FactoredClassifier):
        held = fit if test is None else test
        heads = list(reports)
        targets = [held.targets[h] for h in heads]
        payload["joint_ece"] = [
            joint_ece(
                *(apply_temperature(held.logits[h], t) for h, t in zip(heads, temps)),
                *targets,
            )
            for temps in ((1.0, 1.0), [reports[h].temperature for h in heads])
        ]
    artifacts = [_write_json(out / "calibration.json", payload)]
    write_bins_csv(out / "bins.csv", reports)
    artifacts.append(out / "bins.csv")
    summary = ", ".join(
        f"{h} T={r.temperature:.3f} ECE10 {r.ece_before:.4f}->{r.ece_after:.4f}"
        for h, r in reports.items()
    )
    return artifacts, summary


def _temperatures(path, heads) -> dict:
    if path is None:
        return {h: 1.0 for h in heads}
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, ValueError) as err:
        raise DataError(f"Cannot read calibration {path}: {err}") from err
    try:
        return {h: float(payload["heads"][h]["temperature"]) for h in heads}
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"{path} holds no temperature for head {err}.") from err


def cmd_predict(args, out):
    """Predict labels and confidences of corpus instances or image files."""
    model = _load_model(args.model)
    spec = AugmentSpec.for_notation(_notation_of(model))
    if args.corpus is not None:
        instances = list(_load_corpus(args))
        ids = [inst.id for inst in instances]
        tensors = eval_tensors(instances, spec)
    elif args.images:
        ids = [Path(p).name for p in args.images]
        tensors = np.stack([eval_transform(read_image(p), spec) for p in args.images])
    else:
        raise UsageError("predict needs --corpus or --images.")
    heads = model_heads(model)
    temperatures = _temperatures(args.calibration, heads)
    columns, values = ["id"], [ids]
    for head, params in heads.items():
        probs = apply_temperature(predict_logits(params, tensors), temperatures[head])
        idx = np.argmax(probs, axis=1)
        columns += [head, f"{head}_confidence"]
        values += [
            [params.vocabulary[i] for i in idx],
            [repr(float(p)) for p in probs[np.arange(len(idx)), idx]],
        ]
    path = out / "predictions.csv"
    with open(path, "w", newline="") as fid:
        writer = csv.writer(fid)
        writer.writerow(columns)
        writer.writerows(zip(*values))
    return [path], f"Predicted {len(ids)} glyphs."


def cmd_retrieve(args, out):
    """Index a corpus by fc1 features and list nearest neighbors."""
    corpus = _load_corpus(args)
    model = _load_model(args.model)
    if isinstance(model, FactoredClassifier):
        model = model_heads(model)[args.head]
    spec = AugmentSpec.for_notation(corpus.notation)
    index = build_feature_index(model, corpus, spec)
    index.save(out / "index.gidx")
    if args.query is not None:
        image = read_image(args.query)
        table = {
            Path(args.query).name: query_knn(index, image, args.k, model, spec)
        }
    else:
        table = all_neighbors(index, args.k)
    path = out / "neighbors.csv"
    with open(path, "w", newline="") as fid:
        writer = csv.writer(fid)
        writer.writerow(["query", "rank", "neighbor", "distance", "edition", "label"])
        for query, neighbors in table.items():
            for rank, n in enumerate(neighbors, start=1):
                writer.writerow(
                    [query, rank, n.instance_id, repr(n.distance), n.edition, n.label]
                )
    return [out / "index.gidx", path], f"Indexed {len(index)} instances."


def cmd_bench(args, out):
    """Time full-dataset inference."""
    if args.corpus is not None:
        instances = list(_load_corpus(args))
    else:
        per_class = math.ceil(args.size / 77)
        corpus = gen_synthetic_corpus("suzipu", per_class, seed=args.seed)
        instances = list(corpus)[: args.size]
    if args.model is not None:
        model = _load_model(args.model)
    else:
        rng = np.random.default_rng(args.seed)
        model = FactoredClassifier(
            *(
                build_classifier(default_arch(h), rng, vocabulary(h))
                for h in head_keys("suzipu")
            )
        )
    threads = resolve_threads(args.threads)
    timing = benchmark_inference(
        model,
        instances,
        args.repeats,
        threads,
        AugmentSpec.for_notation(_notation_of(model)),
    )
    payload = {
        "n_instances": len(instances),
        "repeats": args.repeats,
        "threads": threads,
        "mean_seconds": timing.mean_seconds,
        "std_seconds": timing.std_seconds,
        "machine": machine_info(),
    }
    artifacts = [_write_json(out / "bench.json", payload)]
    with open(out / "sys_info.txt", "w") as fid:
        sys_info(fid)
    artifacts.append(out / "sys_info.txt")
    return artifacts, (
        f"Inference over {len(instances)} instances: {timing.mean_seconds:.2f} ± "
        f"{timing.std_seconds:.2f} s."
    )


def cmd_gradcheck(args, out):
    """Finite-difference check of every layer, the loss and a toy model."""
    seeds = [derive_seed(args.seed, i) for i in range(args.seeds)]
    results = gradient_suite(seeds, args.epsilon)
    path = _write_json(out / "gradcheck.json", {"seeds": seeds, "checks": results})
    failed = sorted(name for name, r in results.items() if not r["passed"])
    if failed:
        _write_artifacts(out, "gradcheck", [path])
        raise NumericError(f"Gradient checks failed: {', '.join(failed)}.")
    return [path], f"All {len(results)} gradient checks passed."


# -- parser -------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument(
        "--seed", type=int, required=True, help="Root seed of all randomness."
    )
    parser.add_argument(
        "--out", type=Path, required=True, help="Output directory, created if needed."
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"Worker threads (default: ${THREADS_ENV}, else 1).",
    )
    parser.add_argument(
        "--verbose",
        choices=VERBOSITY,
        default="warning",
        help="Console log level (default: %(default)s).",
    )


def _add_corpus(parser, required=True):
    parser.add_argument(
        "--corpus", type=Path, required=required, help="Path to a corpus.json manifest."
    )
    parser.add_argument(
        "--notation", choices=NOTATIONS, default=None, help="Expected notation."
    )
    parser.add_argument(
        "--denoise",
        action="store_true",
        default=None,
        help="Apply a 3x3 median filter to suzipu images.",
    )


def _add_training(parser):
    parser.add_argument(
        "--config", type=Path, default=None, help="TrainConfig JSON to start from."
    )
    parser.add_argument(
        "--epochs",
        type=int,
        default=None,
        help="Epochs (default: 80 suzipu, 50 lvlvpu).",
    )
    parser.add_argument(
        "--batches",
        type=int,
        default=None,
        help="Batches per epoch (default: 43 suzipu, 21 lvlvpu, 22 with --artificial).",
    )
    parser.add_argument(
        "--batch-size", type=int, default=None, help="Batch size (default: 100)."
    )
    parser.add_argument(
        "--lr",
        type=float,
        default=None,
        help="Initial learning rate (default: 1e-3 suzipu, 5e-4 lvlvpu).",
    )
    parser.add_argument(
        "--weight-decay", type=float, default=None, help="L2 weight (default: 1e-4)."
    )
    parser.add_argument(
        "--gamma", type=float, default=None, help="Focal loss gamma (default: 1.0)."
    )
    parser.add_argument(
        "--patience", type=int, default=None, help="Plateau patience (default: 5)."
    )
    parser.add_argument(
        "--resize-min",
        type=int,
        default=None,
        help="Smallest augmented side (default: 30 suzipu, 33 lvlvpu).",
    )
    parser.add_argument(
        "--resize-max",
        type=int,
        default=None,
        help="Largest augmented side (default: 42 suzipu, 46 lvlvpu).",
    )
    parser.add_argument(
        "--train-fraction",
        type=float,
        default=0.75,
        help="Per-class training share of the pool (default: %(default)s).",
    )
    parser.add_argument(
        "--artificial",
        type=Path,
        default=None,
        help="Directory or manifest of artificial training samples.",
    )


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per command."""
    parser = _Parser(
        prog="glyphforge", description="Glyph classifier training and evaluation."
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help=cmd_synth.__doc__)
    _add_common(p)
    p.add_argument("--notation", choices=NOTATIONS, required=True)
    p.add_argument(
        "--per-class", type=int, required=True, help="Instances of the largest class."
    )
    p.add_argument(
        "--editions", type=int, default=5, help="Editions (default: %(default)s)."
    )
    p.add_argument(
        "--imbalance",
        choices=("uniform", "geometric"),
        default="uniform",
        help="Class size profile (default: %(default)s).",
    )
    p.add_argument(
        "--ratio",
        type=float,
        default=0.85,
        help="Geometric imbalance ratio (default: %(default)s).",
    )
    p.add_argument(
        "--profiles", type=Path, default=None, help="Edition profiles JSON."
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help=cmd_train.__doc__)
    _add_common(p)
    _add_corpus(p)
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help=cmd_eval.__doc__)
    _add_common(p)
    _add_corpus(p)
    p.add_argument("--model", type=Path, required=True, help="Model file or folder.")
    p.add_argument("--edition", default=None, help="Only evaluate this edition.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help=cmd_crossval.__doc__)
    _add_common(p)
    _add_corpus(p)
    _add_training(p)
    p.add_argument(
        "--repeats",
        type=int,
        default=10,
        help="Models per head and fold (default: %(default)s).",
    )
    p.add_argument(
        "--pairing",
        choices=("all", "paired"),
        default="all",
        help="Suzipu head combinations evaluated (default: %(default)s).",
    )
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("calibrate", help=cmd_calibrate.__doc__)
    _add_common(p)
    _add_corpus(p)
    p.add_argument("--model", type=Path, required=True, help="Model file or folder.")
    p.add_argument(
        "--test-corpus", type=Path, default=None, help="Corpus the ECE is reported on."
    )
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help=cmd_predict.__doc__)
    _add_common(p)
    _add_corpus(p, required=False)
    p.add_argument("--model", type=Path, required=True, help="Model file or folder.")
    p.add_argument("--images", type=Path, nargs="+", default=None, help="Image files.")
    p.add_argument(
        "--calibration", type=Path, default=None, help="calibration.json to apply."
    )
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("retrieve", help=cmd_retrieve.__doc__)
    _add_common(p)
    _add_corpus(p)
    p.add_argument("--model", type=Path, required=True, help="Model file or folder.")
    p.add_argument(
        "--head",
        choices=("pitch", "secondary"),
        default="pitch",
        help="Head of a suzipu model (default: %(default)s).",
    )
    p.add_argument("-k", type=int, default=3, help="Neighbors (default: %(default)s).")
    p.add_argument("--query", type=Path, default=None, help="Query image file.")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("bench", help=cmd_bench.__doc__)
    _add_common(p)
    _add_corpus(p, required=False)
    p.add_argument("--model", type=Path, default=None, help="Model file or folder.")
    p.add_argument(
        "--size",
        type=int,
        default=1439,
        help="Synthetic suzipu instances without --corpus (default: %(default)s).",
    )
    p.add_argument(
        "--repeats", type=int, default=5, help="Timed passes (default: %(default)s)."
    )
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help=cmd_gradcheck.__doc__)
    _add_common(p)
    p.add_argument(
        "--seeds",
        type=int,
        default=10,
        help="Random cases per check (default: %(default)s).",
    )
    p.add_argument(
        "--epsilon",
        type=float,
        default=1e-4,
        help="Finite-difference step (default: %(default)s).",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _write_artifacts(out, command, artifacts) -> Path:
    path = out / ARTIFACTS_NAME
    files = sorted({Path(p).relative_to(out).as_posix() for p in artifacts})
    _write_json(path, {"command": command, "artifacts": files})
    return path


def run(argv=None) -> CommandResult:
    """Parse ``argv`` and run one subcommand.

    Parameters
    ----------
    argv : list of str, optional
        Arguments without the program name; ``sys.argv[1:]`` if None.

    Returns
    -------
    result : CommandResult
        Errors are reported on stderr and mapped to their exit code.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        print("[ERROR] No command given.", file=sys.stderr)
        return CommandResult(1, [], "No command given.")
    verbose = "warning"
    handler = None
    try:
        args = parser.parse_args(argv)
        verbose = args.verbose
        set_log_level(verbose)
        handler = add_stream_handler()
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        artifacts, summary = args.func(args, out)
        artifacts.append(_write_artifacts(out, args.command, artifacts))
    except SystemExit as exc:
        # --help and --version
        return CommandResult(exc.code if isinstance(exc.code, int) else 0)
    except GlyphForgeError as err:
        if verbose == "debug":
            traceback.print_exc()
        print(f"[ERROR] {err}", file=sys.stderr)
        return CommandResult(err.exit_code, [], str(err))
    finally:
        if handler is not None:
            logger.removeHandler(handler)
    print(summary)
    return CommandResult(0, artifacts, summary)


def main():
    """Console entry point."""
    sys.exit(run().exit_code)


if __name__ == "__main__":
    main()
