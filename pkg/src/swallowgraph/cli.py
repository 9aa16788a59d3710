"""Command-line surface: synthesize data, train, evaluate, ablate,
gradient-check, and export embeddings.

Exit codes: 0 success, 1 internal/assertion failure, 2 user/input error.
Progress goes to stderr; machine-readable results go to files only.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import cv, gradcheck, hrim, model, patient, reports, training

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


def _log(msg):
    print(msg, file=sys.stderr)


def _default_out(command):
    root = os.environ.get("SWALLOWGRAPH_OUT", "runs")
    return str(Path(root) / command)


def _load_run_config(args):
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.model = dataclasses.replace(cfg.model, seed=args.seed)
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    elif not args.config:
        cfg.out_dir = _default_out(args.command)
    if getattr(args, "parallel_folds", None):
        cfg.parallel_folds = args.parallel_folds
    return cfg.validate()


def _load_prepared(cfg):
    manifest_path = Path(cfg.dataset) / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset not found: {manifest_path}")
    manifest, events, questionnaires = hrim.load_dataset(manifest_path)
    return training.prepare_dataset(manifest, events, questionnaires)


def cmd_synth(args):
    cfg = _load_run_config(args)
    if args.patients is not None:
        cfg.synth_patients = args.patients
    if args.swallows is not None:
        cfg.synth_swallows = args.swallows
    if args.classes:
        cfg.synth_classes = args.classes
    if args.noise is not None:
        cfg.synth_noise = args.noise
    if cfg.synth_patients < 1 or cfg.synth_swallows < 1:
        raise cfgmod.ConfigError("patients and swallows must be >= 1")
    class_counts = tuple(int(x) for x in cfg.synth_classes.split(","))
    if len(class_counts) != 3 or any(k < 2 for k in class_counts):
        raise cfgmod.ConfigError("classes must be three counts >= 2, e.g. 3,4,2")
    spec = hrim.SyntheticSpec(
        patients=cfg.synth_patients,
        swallows_per_patient=cfg.synth_swallows,
        class_counts=class_counts,
        noise=cfg.synth_noise,
        seed=cfg.model.seed,
    )
    out = Path(cfg.out_dir)
    hrim.generate_synthetic_dataset(spec, out)
    cfgmod.save_resolved_config(cfg, out / "resolved_config.txt")
    _log(f"wrote {cfg.synth_patients * cfg.synth_swallows} swallows "
         f"({cfg.synth_patients} patients) to {out} with seed {cfg.model.seed}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_run_config(args)
    prepared = _load_prepared(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _log(f"training {cfg.model.gnn_variant}-{cfg.model.temporal_variant} "
         f"on {len(prepared.labels)} swallows, {cfg.model.folds} folds")
    fold_models, report, assignment = training.train_model(
        cfg.model, prepared, parallel_folds=cfg.parallel_folds)

    cfgmod.save_resolved_config(cfg, out / "resolved_config.txt")
    assignment.save(out / "folds.json")
    for fm in fold_models:
        model.save_params(fm.params, model.params_path(out, fm.fold))
    reports.write_train_report(report, out)

    modal = training.patient_modal_labels(prepared)
    raw = patient.build_feature_matrix(prepared.questionnaires)
    corr = patient.correlation_report(raw, modal, names=patient.feature_names())
    reports.write_correlation_report(corr, out)
    _log(f"mean wAF1: " + ", ".join(
        f"{n}={v:.3f}" for n, v in zip(report.category_names, report.mean)))
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_run_config(args)
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    run_cfg = cfgmod.load_config(run_dir / "resolved_config.txt")
    if cfg.dataset:
        run_cfg.dataset = cfg.dataset
    prepared = _load_prepared(run_cfg)
    assignment = cv.FoldAssignment.load(run_dir / "folds.json")

    fold_scores = []
    for fold in range(assignment.k):
        ppath = model.params_path(run_dir, fold)
        if not ppath.exists():
            raise FileNotFoundError(f"missing model file {ppath}")
        params = model.load_params(ppath)
        fm = training.rebuild_fold_model(run_cfg.model, prepared, assignment,
                                         fold, params)
        _, val_idx = training.fold_event_split(prepared, assignment, fold)
        fold_scores.append(training.evaluate_fold(
            fm, run_cfg.model, prepared, val_idx,
            batch_size=run_cfg.model.batch_size))
        _log(f"fold {fold}: " + ", ".join(f"{v:.3f}" for v in fold_scores[-1]))

    report = training.MetricsReport(
        category_names=prepared.schema.categories,
        fold_scores=np.stack(fold_scores),
        history=[],
    )
    out = Path(cfg.out_dir if args.out else run_dir / "eval")
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save_resolved_config(run_cfg, out / "resolved_config.txt")
    reports.write_train_report(report, out)
    return EXIT_OK


def _parse_masks(text):
    if text == "paper6":
        return training.PAPER_MASKS
    alias = {"man": "manometry", "imp": "impedance", "pat": "patient",
             "manometry": "manometry", "impedance": "impedance",
             "patient": "patient"}
    masks = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            raise cfgmod.ConfigError("empty ablation mask")
        mask = []
        for token in part.split("+"):
            token = token.strip().lower()
            if token not in alias:
                raise cfgmod.ConfigError(f"unknown modality '{token}'")
            mask.append(alias[token])
        masks.append(tuple(mask))
    return tuple(masks)


def cmd_ablate(args):
    cfg = _load_run_config(args)
    masks = _parse_masks(args.masks)
    prepared = _load_prepared(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _log(f"ablation over {len(masks)} masks")
    report = training.run_ablation(cfg.model, prepared, masks=masks,
                                   parallel_folds=cfg.parallel_folds)
    cfgmod.save_resolved_config(cfg, out / "resolved_config.txt")
    reports.write_ablation_report(report, out)
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_suite(sabotage=args.sabotage)
    for r in results:
        tag = "pass" if r["passed"] else "FAIL"
        print(f"{tag} {r['variants']:<26} {r['group']:<10} "
              f"max_rel_err={r['max_rel_error']:.3e}")
    if args.out:
        reports.write_gradcheck_report(results, args.out)
    return EXIT_OK if gradcheck.suite_passed(results) else EXIT_INTERNAL


def cmd_export_embeddings(args):
    cfg = _load_run_config(args)
    run_dir = Path(args.run)
    run_cfg = cfgmod.load_config(run_dir / "resolved_config.txt")
    if cfg.dataset:
        run_cfg.dataset = cfg.dataset
    prepared = _load_prepared(run_cfg)
    assignment = cv.FoldAssignment.load(run_dir / "folds.json")
    fold_models = []
    for fold in range(assignment.k):
        ppath = model.params_path(run_dir, fold)
        if not ppath.exists():
            raise FileNotFoundError(f"missing model file {ppath}")
        params = model.load_params(ppath)
        fold_models.append(training.rebuild_fold_model(
            run_cfg.model, prepared, assignment, fold, params))
    rows = training.collect_embeddings(fold_models, run_cfg.model, prepared,
                                       assignment,
                                       batch_size=run_cfg.model.batch_size)
    out = args.out or str(run_dir / "embeddings.csv")
    reports.write_embeddings_csv(rows, prepared.schema.categories, out)
    _log(f"wrote {len(rows)} embedding rows to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="swallowgraph",
        description="Multimodal graph-based swallow-event classification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", help="output directory")
        if dataset:
            p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--parallel-folds", type=int, dest="parallel_folds",
                       help="train folds in parallel processes")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, dataset=False)
    p.add_argument("--patients", type=int)
    p.add_argument("--swallows", type=int, help="swallows per patient")
    p.add_argument("--classes", help="per-category class counts, e.g. 3,4,2")
    p.add_argument("--noise", type=float)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training + reports")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    common(p)
    p.add_argument("--run", required=True, help="training run directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="modality ablation study")
    common(p)
    p.add_argument("--masks", default="paper6",
                   help="'paper6' or e.g. 'man+imp+pat;man;imp'")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--out", help="optional CSV report path")
    p.add_argument("--sabotage", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-embeddings",
                       help="per-swallow category embeddings as CSV")
    common(p)
    p.add_argument("--run", required=True, help="training run directory")
    p.set_defaults(fn=cmd_export_embeddings)
    return parser


USAGE_ERRORS = (
    cfgmod.ConfigError,
    hrim.DataFormatError,
    patient.PatientFeatureError,
    FileNotFoundError,
    cv.CvError,
)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except USAGE_ERRORS as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except Exception as exc:  # internal failure contract: exit 1
        _log(f"internal error: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
