"""Command-line entry point: ``jointshape <command> [options]``.

Commands mirror the pipeline stages: ``gen`` (phantom dataset), ``pretrain``
(auto-encoder), ``train`` (one classifier variant), ``eval`` (score a
checkpoint), ``cv`` (cross-validation report) and ``roc`` (ROC from a
predictions file).  Every configuration field is also a ``--flag``; flags
override ``--config`` file values, which override the preset.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import model as M
from . import train as T
from .config import PRESETS, ConfigError, ExperimentConfig, load_config
from .nn.checkpoint import CheckpointError
from .pipelines import PIPELINES, make_pipeline
from .shapegen import GenerationError, MaskError, generate_dataset, read_dataset, split_folds, write_dataset

log = logging.getLogger("jointshape")

EXIT_FAILURE, EXIT_USAGE, EXIT_MISSING = 1, 2, 3


class MissingArtifact(RuntimeError):
    def __init__(self, what, path, hint):
        super().__init__(f"{what} not found at {path}; {hint}")


def _flag(name):
    return "--" + name.replace("_", "-")


def _config_parser():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="flat 'key = value' file")
    for f in fields(ExperimentConfig):
        kw = {"choices": sorted(PRESETS)} if f.name == "preset" else {}
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar=f.name.upper(), **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_parser()
    parser = argparse.ArgumentParser(
        prog="jointshape", description="Shape-vector abnormality classification of 3D binary masks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a phantom dataset")
    p.add_argument("--ae", action="store_true",
                   help="generate the auto-encoder set (ae_count normals, ae_seed) instead")
    p.add_argument("--out", help="output directory (default: data_dir, or ae_data_dir with --ae)")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the auto-encoder")
    p.add_argument("--data", help="dataset directory; normal cases are used (default: ae_data_dir)")
    p.add_argument("--out", help="checkpoint path (default: checkpoint_dir/ae.sckp)")

    p = sub.add_parser("train", parents=[common], help="train one classifier variant")
    p.add_argument("--pipeline", choices=PIPELINES, required=True)
    p.add_argument("--data", help="dataset directory (default: data_dir)")
    p.add_argument("--ae-checkpoint", help="pretrained auto-encoder (default: checkpoint_dir/ae.sckp)")
    p.add_argument("--fold-exclude", type=int, default=-1, help="hold out this fold")
    p.add_argument("--out", help="checkpoint path (default: checkpoint_dir/<pipeline>.sckp)")

    p = sub.add_parser("eval", parents=[common], help="score a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: data_dir)")
    p.add_argument("--fold", type=int, help="evaluate this fold only (default: the held-out fold)")
    p.add_argument("--out", help="report directory (default: report_dir)")

    p = sub.add_parser("cv", parents=[common], help="cross-validate a pipeline")
    p.add_argument("--pipeline", choices=PIPELINES, required=True)
    p.add_argument("--data", help="dataset directory (default: data_dir)")
    p.add_argument("--ae-checkpoint", help="pretrained auto-encoder (default: checkpoint_dir/ae.sckp)")
    p.add_argument("--out", help="report directory (default: report_dir)")

    p = sub.add_parser("roc", help="ROC curve and AUC from a predictions CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", help="write the ROC CSV here instead of stdout")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return load_config(getattr(args, "config", None), overrides=overrides)


def _echo_config(cfg, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _need(path, what, hint):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(what, path, hint)
    return path


def _dataset(path):
    _need(Path(path) / "manifest.csv", "dataset manifest", "run `jointshape gen` first")
    return read_dataset(path)


def _autoencoder(cfg, path):
    path = path or Path(cfg.checkpoint_dir) / "ae.sckp"
    _need(path, "auto-encoder checkpoint", "run `jointshape pretrain` first")
    model, _ = M.load_model(path, expect=cfg.architecture())
    return model


def cmd_gen(cfg, args):
    if args.ae:
        out = Path(args.out or cfg.ae_data_dir)
        cases = generate_dataset(cfg.phantom(), cfg.ae_count, 0, cfg.ae_seed)
    else:
        out = Path(args.out or cfg.data_dir)
        cases = generate_dataset(cfg.phantom(), cfg.count_normal, cfg.count_abnormal, cfg.seed)
    manifest = write_dataset(cases, out)
    _echo_config(cfg, out)
    print(f"wrote {len(cases)} cases to {manifest}")


def cmd_pretrain(cfg, args):
    cases = [c for c in _dataset(args.data or cfg.ae_data_dir) if c.label == 0]
    if not cases:
        raise MissingArtifact("normal cases", args.data or cfg.ae_data_dir,
                              "generate a dataset with --count-normal > 0")
    out = Path(args.out or Path(cfg.checkpoint_dir) / "ae.sckp")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        model, train_log = T.pretrain_autoencoder(cases, cfg.pretrain_config(), cfg.architecture())
    except T.TrainingError as exc:
        if exc.model is not None:
            M.save_model(out.with_suffix(".last-good.sckp"), exc.model)
        raise
    M.save_model(out, model)
    out.with_suffix(".log").write_text(train_log.to_text(), encoding="utf-8")
    _echo_config(cfg, out.parent)
    dsc = T.reconstruction_dsc(model, cases)
    report = {"cases": len(cases), "mean_dsc": float(np.mean(dsc)), "min_dsc": float(np.min(dsc)),
              "dsc": {c.case_id: float(d) for c, d in zip(cases, dsc)}}
    out.with_suffix(".json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    print(f"wrote {out}; mean training reconstruction DSC {report['mean_dsc']:.4f}")


def _train_split(cfg, cases, fold_exclude):
    if fold_exclude < 0:
        return cases
    folds = split_folds(cases, cfg.folds, cfg.fold_seed)
    if fold_exclude >= cfg.folds:
        raise ConfigError(f"fold-exclude: must be < folds ({cfg.folds})")
    return [c for c in cases if folds.fold_of(c.case_id) != fold_exclude]


def cmd_train(cfg, args):
    cases = _train_split(cfg, _dataset(args.data or cfg.data_dir), args.fold_exclude)
    out = Path(args.out or Path(cfg.checkpoint_dir) / f"{args.pipeline}.sckp")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.pipeline == "svm":
        model = _autoencoder(cfg, args.ae_checkpoint)
        X = [M.encode(model, T.prepare(c.grid, (0.0, 0.0, 0.0), model.arch.size)) for c in cases]
        svm = M.svm_train(X, [c.label for c in cases], cfg.svm_c, cfg.svm_iterations)
        M.save_model(out, model, svm=svm, fold_exclude=args.fold_exclude)
    else:
        pretrained = None if args.pipeline == "scratch" else _autoencoder(cfg, args.ae_checkpoint)
        tcfg = cfg.train_config(args.pipeline)
        model, train_log, eta = T.train_classifier(cases, pretrained, tcfg, arch=cfg.architecture())
        M.save_model(out, model, eta=eta, lam=tcfg.lam if args.pipeline == "discriminative" else 0.0,
                     fold_exclude=args.fold_exclude)
        out.with_suffix(".log").write_text(train_log.to_text(), encoding="utf-8")
    _echo_config(cfg, out.parent)
    print(f"wrote {out}")


def cmd_eval(cfg, args):
    path = _need(args.checkpoint, "checkpoint", "run `jointshape train` first")
    model, meta = M.load_model(path)
    cases = _dataset(args.data or cfg.data_dir)
    fold = meta["fold_exclude"] if args.fold is None else args.fold
    if fold >= 0:
        folds = split_folds(cases, cfg.folds, cfg.fold_seed)
        cases = [c for c in cases if folds.fold_of(c.case_id) == fold]
    svm = meta["svm"]
    threshold = 0.0 if svm is not None else 0.5
    preds = []
    for c in cases:
        x = T.prepare(c.grid, (0.0, 0.0, 0.0), model.arch.size)
        score = M.svm_predict(svm, M.encode(model, x)) if svm is not None else M.predict(model, x)
        preds.append(E.PredictionRecord(c.case_id, c.label, score, fold, -1))
    out = Path(args.out or cfg.report_dir)
    _echo_config(cfg, out)
    stem = Path(path).stem
    sens, spec = E.sensitivity_specificity(preds, threshold)
    curve = E.roc_curve(preds)
    report = {"checkpoint": str(path), "fold": fold, "threshold": threshold, "cases": len(preds),
              "auc": curve.auc, "sensitivity": sens, "specificity": spec}
    (out / f"eval_{stem}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    lines = ["case_id,fold,seed,label,score"] + [
        f"{p.case_id},{p.fold},{p.seed},{p.y},{p.score!r}" for p in preds]
    (out / f"predictions_{stem}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"auc = {curve.auc:.6f}  sensitivity = {sens:.4f}  specificity = {spec:.4f}")


def cmd_cv(cfg, args):
    cases = _dataset(args.data or cfg.data_dir)
    pretrained = None if args.pipeline == "scratch" else _autoencoder(cfg, args.ae_checkpoint)
    folds = split_folds(cases, cfg.folds, cfg.fold_seed)
    result = E.cross_validate(cases, folds, make_pipeline(cfg, args.pipeline, pretrained),
                              cfg.seeds, cfg.corruption_conditions(), jobs=cfg.jobs)
    out = Path(args.out or cfg.report_dir)
    _echo_config(cfg, out)
    (out / f"cv_{args.pipeline}.json").write_text(result.to_text(), encoding="utf-8")
    for cond in result.reports:
        suffix = "" if cond == "clean" else f"_{cond}"
        (out / f"predictions_{args.pipeline}{suffix}.csv").write_text(
            result.predictions_csv(cond), encoding="utf-8")
    for cond, rep in result.reports.items():
        s = rep.summary()
        print(f"{cond:>13}: auc {s['auc']['mean']:.4f} ± {s['auc']['std']:.4f}  "
              f"sens {s['sensitivity']['mean']:.4f}  spec {s['specificity']['mean']:.4f}")


def cmd_roc(args):
    path = _need(args.predictions, "predictions file", "run `jointshape eval` or `jointshape cv` first")
    curve = E.roc_curve(E.read_predictions(Path(path).read_text(encoding="utf-8")))
    if args.out:
        Path(args.out).write_text(curve.to_csv(), encoding="utf-8")
    else:
        sys.stdout.write(curve.to_csv())
    print(f"auc = {curve.auc!r}")


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "cv": cmd_cv}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "roc":
            cmd_roc(args)
        else:
            COMMANDS[args.command](resolve_config(args), args)
    except ConfigError as exc:
        print(f"jointshape: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"jointshape: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (M.ModelMismatchError, CheckpointError, MaskError, GenerationError,
            T.TrainingError, ValueError, RuntimeError, OSError) as exc:
        print(f"jointshape: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
