"""Command-line pipeline orchestration.

Subcommands mirror the pipeline stages: prepare (manifest + augmentation),
extract (features), train (linear head), evaluate (metrics report), report
(cross-model comparison table plus rendered figures). Every command reads
one optional config file; flags override config fields; the effective
config is echoed into output artifacts. Exit codes: 0 success, 1 validation
failure, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import backbone as backbone_mod
from . import evaluate as evaluate_mod
from . import head as head_mod
from .augment import augment_minority
from .config import PipelineConfig, load_config
from .errors import InputError, PipelineError, ValidationError
from .manifest import (
    DatasetManifest,
    SplitSpec,
    build_manifest,
    load_manifest,
    save_manifest,
    validate_manifest,
)
from .synthetic import SYNTHETIC_BACKBONE, make_gaussian_fixture

MANIFEST_NAME = "manifest.csv"
SYNTHETIC_MANIFEST_NAME = "synthetic_manifest.csv"


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; here they are validation (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _work_dir(cfg: PipelineConfig) -> Path:
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    return work


def _feature_path(work: Path, backbone: str, split: str) -> Path:
    return work / f"features_{backbone}_{split}.feat"


def _head_path(work: Path, backbone: str) -> Path:
    return work / f"head_{backbone}.head"


def _report_path(work: Path, backbone: str) -> Path:
    return work / f"report_{backbone}.json"


def _apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Fold the flags present on this subcommand into the config tree."""
    if getattr(args, "covid_dir", None):
        cfg = replace(cfg, covid_dir=args.covid_dir)
    if getattr(args, "negative_dir", None):
        cfg = replace(cfg, negative_dir=args.negative_dir)
    if getattr(args, "work_dir", None):
        cfg = replace(cfg, work_dir=args.work_dir)
    if getattr(args, "split_spec", None):
        cfg = replace(cfg, split_spec_path=args.split_spec)
    if getattr(args, "model", None):
        cfg = replace(cfg, models={**cfg.models, args.backbone: args.model})

    aug = cfg.augment
    if getattr(args, "seed", None) is not None:
        aug = replace(aug, seed=args.seed)
    if getattr(args, "target_count", None) is not None:
        aug = replace(aug, target_count=args.target_count)
    if aug is not cfg.augment:
        cfg = replace(cfg, augment=aug)

    tr = cfg.train
    if getattr(args, "epochs", None) is not None:
        tr = replace(tr, epochs=args.epochs)
    if getattr(args, "batch_size", None) is not None:
        tr = replace(tr, batch_size=args.batch_size)
    if getattr(args, "learning_rate", None) is not None:
        tr = replace(tr, learning_rate=args.learning_rate)
    if getattr(args, "shuffle_seed", None) is not None:
        tr = replace(tr, shuffle_seed=args.shuffle_seed)
    if tr is not cfg.train:
        cfg = replace(cfg, train=tr)

    ev = cfg.evaluate
    if getattr(args, "bins", None) is not None:
        ev = replace(ev, bins=args.bins)
    if getattr(args, "target_sensitivity", None) is not None:
        ev = replace(ev, target_sensitivity=args.target_sensitivity)
    if ev is not cfg.evaluate:
        cfg = replace(cfg, evaluate=ev)
    return cfg


def _labels_for(features: backbone_mod.FeatureMatrix, manifest: DatasetManifest):
    by_path = {r.image_path: r for r in manifest.records}
    missing = [rid for rid in features.row_ids if rid not in by_path]
    if missing:
        raise ValidationError(
            f"{len(missing)} feature rows have no manifest record, first: {missing[0]}"
        )
    return [by_path[rid].label for rid in features.row_ids]


def _write_synthetic_fixture(work: Path):
    """Generate the Gaussian fixture and persist it like real pipeline output."""
    fixture = make_gaussian_fixture()
    save_manifest(fixture.manifest, work / SYNTHETIC_MANIFEST_NAME)
    backbone_mod.save_features(
        fixture.train_features, _feature_path(work, SYNTHETIC_BACKBONE, "train")
    )
    backbone_mod.save_features(
        fixture.test_features, _feature_path(work, SYNTHETIC_BACKBONE, "test")
    )
    return fixture


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def cmd_prepare(cfg: PipelineConfig) -> int:
    if not cfg.covid_dir or not cfg.negative_dir:
        raise ValidationError("prepare needs covid_dir and negative_dir (config or flags)")
    work = _work_dir(cfg)
    split_spec = (
        SplitSpec.from_yaml(cfg.split_spec_path)
        if cfg.split_spec_path
        else SplitSpec.published_default()
    )
    manifest = build_manifest(cfg.covid_dir, cfg.negative_dir, split_spec)
    manifest = augment_minority(manifest, cfg.augment, work / "augmented")
    report = validate_manifest(manifest, check_images=True)
    save_manifest(manifest, work / MANIFEST_NAME)
    print(f"manifest: {work / MANIFEST_NAME} ({len(manifest.records)} records)")
    if report.issues:
        for issue in report.issues:
            print(f"invalid: {issue.kind.value}: {issue.message}", file=sys.stderr)
        return 1
    return 0


def cmd_extract(cfg: PipelineConfig, backbone: str) -> int:
    work = _work_dir(cfg)
    model_path = cfg.models.get(backbone)
    if not model_path:
        raise ValidationError(f"no model file configured for backbone {backbone}")
    spec = backbone_mod.load_backbone(backbone, model_path)
    manifest = load_manifest(work / MANIFEST_NAME)
    train_f, test_f = backbone_mod.extract_manifest_features(spec, manifest)
    backbone_mod.save_features(train_f, _feature_path(work, backbone, "train"))
    backbone_mod.save_features(test_f, _feature_path(work, backbone, "test"))
    print(
        f"features: {train_f.matrix.shape[0]}x{train_f.matrix.shape[1]} train, "
        f"{test_f.matrix.shape[0]}x{test_f.matrix.shape[1]} test"
    )
    return 0


def cmd_train(cfg: PipelineConfig, backbone: str, synthetic: bool) -> int:
    work = _work_dir(cfg)
    if synthetic:
        fixture = _write_synthetic_fixture(work)
        features, manifest = fixture.train_features, fixture.manifest
    else:
        features = backbone_mod.load_features(_feature_path(work, backbone, "train"))
        manifest = load_manifest(work / MANIFEST_NAME)
    labels = _labels_for(features, manifest)
    head, history = head_mod.train_head(features, labels, cfg.train)
    head_mod.save_head(head, _head_path(work, features.backbone))
    history_doc = {
        "backbone": features.backbone,
        "epoch_mean_loss": list(history.epoch_mean_loss),
        "config": cfg.train.echo(),
    }
    (work / f"history_{features.backbone}.json").write_text(
        json.dumps(history_doc, indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"head: {_head_path(work, features.backbone)} "
        f"(final epoch loss {history.epoch_mean_loss[-1]:.6f})"
    )
    return 0


def cmd_evaluate(cfg: PipelineConfig, backbone: str, synthetic: bool, sweep_csv: bool) -> int:
    work = _work_dir(cfg)
    if synthetic:
        fixture = make_gaussian_fixture()
        features, manifest = fixture.test_features, fixture.manifest
        backbone = SYNTHETIC_BACKBONE
    else:
        features = backbone_mod.load_features(_feature_path(work, backbone, "test"))
        manifest = load_manifest(work / MANIFEST_NAME)
    head = head_mod.load_head(_head_path(work, backbone))
    scores = head_mod.predict_scores(head, features, manifest.test_records)
    report = evaluate_mod.build_eval_report(
        scores,
        bins=cfg.evaluate.bins,
        target_sensitivity=cfg.evaluate.target_sensitivity,
    )
    evaluate_mod.save_report(report, _report_path(work, backbone), config_echo=cfg.echo())
    if sweep_csv:
        _write_sweep_csv(report, work / f"sweep_{backbone}.csv")
    op = evaluate_mod.operating_point(scores, report.threshold)
    print(
        f"report: {_report_path(work, backbone)} "
        f"(auc {report.auc:.4f}, sensitivity {op.sensitivity:.4f}, "
        f"specificity {op.specificity:.4f} at threshold {report.threshold:.6f})"
    )
    return 0


def _write_sweep_csv(report: evaluate_mod.EvalReport, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "sensitivity", "specificity", "tp", "fn", "tn", "fp"])
    for op in report.sweep:
        writer.writerow(
            [
                repr(op.threshold),
                repr(op.sensitivity),
                repr(op.specificity),
                op.tp,
                op.fn,
                op.tn,
                op.fp,
            ]
        )
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_report(cfg: PipelineConfig, out: str | None, figures: bool) -> int:
    work = _work_dir(cfg)
    report_files = sorted(work.glob("report_*.json"))
    if not report_files:
        raise InputError(f"no report_*.json files in {work}")
    reports = {p.stem[len("report_") :]: evaluate_mod.load_report(p) for p in report_files}

    out_path = Path(out) if out else work / "comparison.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "model",
            "sensitivity",
            "sensitivity_r",
            "specificity",
            "specificity_r",
            "auc",
            "threshold",
        ]
    )
    for name in sorted(reports):
        rep = reports[name]
        writer.writerow(
            [
                name,
                repr(rep["sensitivity_ci"]["accuracy"]),
                repr(rep["sensitivity_ci"]["r"]),
                repr(rep["specificity_ci"]["accuracy"]),
                repr(rep["specificity_ci"]["r"]),
                repr(rep["auc"]),
                repr(rep["threshold"]),
            ]
        )
    out_path.write_text(buf.getvalue(), encoding="utf-8")
    print(f"comparison: {out_path} ({len(reports)} models)")

    if figures:
        from . import figures as figures_mod

        fig_dir = work / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        for name, rep in reports.items():
            figures_mod.render_histograms(rep, fig_dir / f"histograms_{name}.png")
            figures_mod.render_roc(rep, fig_dir / f"roc_{name}.png", label=name)
            figures_mod.render_confusion(rep, fig_dir / f"confusion_{name}.png")
        figures_mod.render_roc_overlay(reports, fig_dir / "roc_overlay.png")
        print(f"figures: {fig_dir}")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key-value tree)")
    p.add_argument("--work-dir", help="artifact directory (default from config)")


def build_parser() -> _Parser:
    parser = _Parser(prog="cxrscreen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build, augment, and validate the dataset manifest")
    _add_common(p)
    p.add_argument("--covid-dir", help="positive corpus directory")
    p.add_argument("--negative-dir", help="negative corpus directory")
    p.add_argument("--split-spec", help="split rules file (overrides the built-in default)")
    p.add_argument("--seed", type=int, help="augmentation seed")
    p.add_argument("--target-count", type=int, help="positive training count after augmentation")

    p = sub.add_parser("extract", help="extract frozen-backbone features for both splits")
    _add_common(p)
    p.add_argument("--backbone", required=True, choices=sorted(backbone_mod.FEATURE_DIMS))
    p.add_argument("--model", help="model file (overrides config models entry)")

    p = sub.add_parser("train", help="train the linear head on extracted features")
    _add_common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--backbone", choices=sorted(backbone_mod.FEATURE_DIMS))
    group.add_argument(
        "--synthetic-fixture",
        action="store_true",
        help="train on the generated Gaussian feature fixture",
    )
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--shuffle-seed", type=int)

    p = sub.add_parser("evaluate", help="score the test split and write the metrics report")
    _add_common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--backbone", choices=sorted(backbone_mod.FEATURE_DIMS))
    group.add_argument(
        "--synthetic-fixture",
        action="store_true",
        help="evaluate the head trained on the Gaussian fixture",
    )
    p.add_argument("--bins", type=int, help="histogram bin count")
    p.add_argument("--target-sensitivity", type=float, help="operating-point target")
    p.add_argument(
        "--no-sweep-csv",
        action="store_true",
        help="skip writing the threshold sweep as CSV",
    )

    p = sub.add_parser("report", help="merge evaluation reports and render figures")
    _add_common(p)
    p.add_argument("--out", help="comparison CSV path (default <work>/comparison.csv)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "extract":
            return cmd_extract(cfg, args.backbone)
        if args.command == "train":
            return cmd_train(cfg, args.backbone, args.synthetic_fixture)
        if args.command == "evaluate":
            return cmd_evaluate(
                cfg, args.backbone, args.synthetic_fixture, not args.no_sweep_csv
            )
        if args.command == "report":
            return cmd_report(cfg, args.out, not args.no_figures)
        raise ValidationError(f"unknown command {args.command!r}")
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
