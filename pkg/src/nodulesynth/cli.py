"""Unified command-line entry point.

Exit codes: 0 success, 1 validation error (message on stderr, nothing
written), 2 runtime failure (a ``.failed`` marker is dropped next to any
partial outputs). ``INPAINT_GAN_THREADS`` caps internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import torch

from nodulesynth import classifier as clf
from nodulesynth import checkpoint as ckpt_io
from nodulesynth.metrics import format_metrics_table, MetricsReport
from nodulesynth.patches import (
    PipelineConfig,
    extract_patch,
    ManifestRow,
    load_patch_dataset,
    normalize_hu,
    save_patch_dataset,
    write_manifest,
)
from nodulesynth.phantom import FixtureSpec, make_phantom_fixture
from nodulesynth.training import GanConfig, load_train_state, synthesize_dataset, train
from nodulesynth.volume_io import (
    LABEL_BENIGN,
    LABEL_MALIGNANT,
    Volume,
    consensus_malignancy,
    load_volume,
    parse_annotations,
    save_volume,
)

LABEL_WORDS = {"benign": LABEL_BENIGN, "malignant": LABEL_MALIGNANT}
REGIME_FLAGS = {"raw": "raw", "raw-weighted": "raw_weighted", "raw-synthesis": "raw_synthesis"}


class CliError(Exception):
    """Validation failure: reported on stderr, exit code 1, nothing written."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits 2; the contract wants 1
        raise CliError(message)


def _load_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} file not found: {p}")
    try:
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} file {p} is not valid JSON: {exc}") from exc


def _classifier_config(data: dict, seed_override: int | None = None) -> clf.ClassifierConfig:
    allowed = {f.name for f in fields(clf.ClassifierConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise CliError(f"unknown keys {sorted(unknown)} in classifier config")
    if "desk_blocks" in data:
        data = dict(data, desk_blocks=tuple(data["desk_blocks"]))
    cfg = clf.ClassifierConfig(**data)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Subcommand handlers (validate first, then act)


def _cmd_make_phantom(args) -> None:
    if args.train < 1 or args.val < 1 or args.test < 1:
        raise CliError("split sizes must be positive")
    if not 0.0 < args.malignant_fraction < 1.0:
        raise CliError("malignant-fraction must lie in (0, 1)")
    spec = FixtureSpec(
        n_train=args.train,
        n_val=args.val,
        n_test=args.test,
        malignant_fraction=args.malignant_fraction,
        n_volumes=args.volumes,
    )
    summary = make_phantom_fixture(args.out, args.seed, spec)
    print(json.dumps(summary, sort_keys=True))


def _cmd_extract_patches(args) -> None:
    annotations_path = _require(args.annotations, "annotation table")
    volumes_dir = _require(args.volumes, "volume directory")
    config = PipelineConfig()
    if args.config:
        raw = _load_json(args.config, "pipeline config")
        allowed = {f.name for f in fields(PipelineConfig)}
        unknown = set(raw) - allowed
        if unknown:
            raise CliError(f"unknown keys {sorted(unknown)} in pipeline config")
        for key in ("target_spacing", "patch_shape", "hu_window", "noise_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        config = PipelineConfig(**raw)
    annotations = parse_annotations(annotations_path)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes: dict[str, object] = {}
    rows = []
    for i, ann in enumerate(annotations):
        if ann.source_volume_id not in volumes:
            vol_path = volumes_dir / f"{ann.source_volume_id}.vol"
            if not vol_path.exists():
                raise CliError(f"volume {ann.source_volume_id!r} missing under {volumes_dir}")
            volumes[ann.source_volume_id] = load_volume(vol_path)
        patch_hu = extract_patch(volumes[ann.source_volume_id], ann.center, config)
        normalized = normalize_hu(patch_hu, config.hu_window)
        name = f"patch_{i:05d}.vol"
        save_volume(Volume(voxels=normalized, spacing=config.target_spacing), out / name)
        rows.append(
            ManifestRow(
                patch_file=name,
                label=consensus_malignancy(ann.scores),
                diameter_mm=ann.diameter_mm,
                split=args.split,
            )
        )
    write_manifest(rows, out / "manifest.csv")
    print(f"extracted {len(rows)} patches to {out}")


def _cmd_train_gan(args) -> None:
    data_dir = _require(args.data, "patch dataset")
    config = GanConfig()
    if args.config:
        try:
            config = GanConfig.from_dict(_load_json(args.config, "GAN config"))
        except (ValueError, TypeError) as exc:
            raise CliError(f"invalid GAN config: {exc}") from exc
    if args.resume:
        _require(args.resume, "resume checkpoint")
    dataset = load_patch_dataset(data_dir, split="train", noise_seed=config.seed)
    if not dataset:
        raise CliError(f"no training patches in {data_dir}")
    state = train(dataset, config, args.out, resume_from=args.resume)
    print(f"trained to step {state.step}; checkpoints under {Path(args.out) / 'checkpoints'}")


def _cmd_synthesize(args) -> None:
    ckpt_dir = _require(args.ckpt, "checkpoint")
    source_dir = _require(args.source, "source patch dataset")
    if args.count < 0:
        raise CliError("count must be >= 0")
    target_label = LABEL_WORDS[args.label]
    state = load_train_state(ckpt_dir)
    source = [
        s
        for s in load_patch_dataset(source_dir, split=args.source_split, noise_seed=args.seed)
        if s.label == target_label and not s.synthetic
    ]
    if args.count > 0 and not source:
        raise CliError(f"no real {args.label} patches in split {args.source_split!r}")
    samples = synthesize_dataset(state, source, target_label, args.count, args.seed)
    save_patch_dataset(samples, ["train"] * len(samples), args.out, prefix="synthetic")
    print(f"wrote {len(samples)} synthetic {args.label} patches to {args.out}")


def _cmd_train_classifier(args) -> None:
    data_dir = _require(args.data, "patch dataset")
    regime = REGIME_FLAGS[args.regime]
    config = clf.ClassifierConfig()
    if args.config:
        config = _classifier_config(_load_json(args.config, "classifier config"))
    seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]
    if not seeds:
        raise CliError("at least one seed required")
    if regime == "raw_synthesis":
        if not args.synthetic:
            raise CliError("--synthetic DIR is required for regime raw-synthesis")
        _require(args.synthetic, "synthetic patch dataset")

    result = clf.run_experiment(data_dir, regime, config, seeds, synthetic_dir=args.synthetic)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"report_{regime}.json", "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=1, sort_keys=True)

    # Keep a loadable model for `evaluate`: retrain-free, last seed's best.
    cfg_last = _classifier_config(
        {f.name: getattr(config, f.name) for f in fields(clf.ClassifierConfig)}, seeds[-1]
    )
    cfg_last.loss_mode = "class_weighted" if regime == "raw_weighted" else "unweighted"
    train_split = load_patch_dataset(data_dir, split="train")
    if regime == "raw_synthesis":
        train_split += load_patch_dataset(args.synthetic, split="train")
    val_split = load_patch_dataset(data_dir, split="val")
    model, _ = clf.train_classifier(train_split, val_split, cfg_last)
    cfg_dict = {f.name: getattr(cfg_last, f.name) for f in fields(clf.ClassifierConfig)}
    ckpt_io.save_network(model, out / "model", cfg_dict)
    print(clf.experiment_table([result]))


def _cmd_evaluate(args) -> None:
    ckpt_dir = _require(args.ckpt, "classifier checkpoint")
    data_dir = _require(args.data, "patch dataset")
    if args.split not in ("train", "val", "test"):
        raise CliError(f"invalid split {args.split!r}")
    raw_cfg = ckpt_io.read_config(ckpt_dir)
    config = _classifier_config(raw_cfg)
    model = clf.build_classifier(config)
    ckpt_io.load_network(model, ckpt_dir)
    samples = load_patch_dataset(data_dir, split=args.split)
    if not samples:
        raise CliError(f"split {args.split!r} is empty in {data_dir}")
    report = clf.evaluate(model, samples, threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json())


def _cmd_report(args) -> None:
    paths = [Path(p) for p in args.inputs]
    for p in paths:
        if not p.exists():
            raise CliError(f"report input not found: {p}")
    groups = {}
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            data = json.load(fh)
        reports = [MetricsReport.from_dict(d) for d in data["per_seed"]]
        groups[data["regime"]] = [(f"seed-{i}", r) for i, r in enumerate(reports)]
    table = format_metrics_table(groups)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n", encoding="utf-8")
    print(table)


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="nodulesynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("make-phantom", help="write a phantom fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=240)
    p.add_argument("--val", type=int, default=30)
    p.add_argument("--test", type=int, default=30)
    p.add_argument("--malignant-fraction", type=float, default=0.2)
    p.add_argument("--volumes", type=int, default=12)
    p.set_defaults(handler=_cmd_make_phantom)

    p = sub.add_parser("extract-patches", help="extract annotated patches")
    p.add_argument("--annotations", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(handler=_cmd_extract_patches)

    p = sub.add_parser("train-gan", help="train the in-painting GAN")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="GAN config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(handler=_cmd_train_gan)

    p = sub.add_parser("synthesize", help="generate class-conditioned patches")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--label", required=True, choices=sorted(LABEL_WORDS))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--source-split", default="train", choices=("train", "val", "test"))
    p.set_defaults(handler=_cmd_synthesize)

    p = sub.add_parser("train-classifier", help="run a classification regime")
    p.add_argument("--data", required=True)
    p.add_argument("--regime", required=True, choices=sorted(REGIME_FLAGS))
    p.add_argument("--config", default=None, help="classifier config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", default=None, help="synthetic patch dir (raw-synthesis)")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(handler=_cmd_train_classifier)

    p = sub.add_parser("evaluate", help="evaluate a classifier checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("report", help="combine regime reports into a table")
    p.add_argument("inputs", nargs="+", help="report_*.json files")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_report)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    threads = os.environ.get("INPAINT_GAN_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"invalid INPAINT_GAN_THREADS value {threads!r}", file=sys.stderr)
            return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure after validation
        out = getattr(args, "out", None)
        if out:
            out_path = Path(out)
            if out_path.suffix:
                out_path = out_path.parent
            out_path.mkdir(parents=True, exist_ok=True)
            (out_path / ".failed").write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
