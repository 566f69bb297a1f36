"""Command-line interface.

Subcommands: ``gen-synthetic``, ``train``, ``evaluate``, ``infer``,
``simulate-epochs``. Configuration comes from an optional JSON file plus
flag overrides; every failure prints one machine-parsable line of the form
``error[<code>]: <message>`` to stderr and exits with 2 (config), 3 (data)
or 4 (numeric).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import ConfigError, MtfcddError
from .sampler import estimate_epoch_length, std_epoch_ratio
from .synth import SynthConfig, generate_synthetic
from .train import RunConfig, evaluate_run, infer_images, train_run

log = logging.getLogger(__name__)


def _load_config_file(path) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file must hold a JSON object: {path}")
    return raw


def _apply_overrides(raw: dict, args) -> dict:
    """Fold command-line flags into the raw config dict (flags win)."""
    def put(section, key, value):
        if value is not None:
            raw.setdefault(section, {})[key] = value

    put("optimizer", "lr", getattr(args, "lr", None))
    put("optimizer", "batch_size", getattr(args, "batch_size", None))
    put("training", "seed", getattr(args, "seed", None))
    put("training", "epochs", getattr(args, "epochs", None))
    put("training", "balanced", getattr(args, "balanced", None))
    put("model", "num_types", getattr(args, "num_types", None))
    put("model", "backbone_stages", getattr(args, "stages", None))
    put("model", "head_blocks", getattr(args, "head_blocks", None))
    put("evaluation", "fpr_limit", getattr(args, "fpr_limit", None))
    if getattr(args, "manifest", None):
        raw["manifest_path"] = args.manifest
    if getattr(args, "out", None):
        raw["out_dir"] = args.out
    return raw


def _build_run_config(args) -> RunConfig:
    raw = _load_config_file(args.config) if args.config else {}
    explicit_model = set(raw.get("model", {}))
    raw = _apply_overrides(raw, args)
    if args.num_types is not None:
        explicit_model.add("num_types")
    config = RunConfig.from_dict(raw)
    if not config.manifest_path:
        raise ConfigError("no dataset manifest given (use --manifest or the config file)")
    # fill model geometry from the manifest unless set explicitly
    from .data import load_manifest

    manifest = load_manifest(config.manifest_path)
    if "input_size" not in explicit_model:
        h, w = manifest.image_size
        config.model.input_size = (h, w, manifest.channels)
    if "num_types" not in explicit_model:
        config.model.num_types = manifest.num_types
    config.validate()
    return config


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    config = SynthConfig(out_dir=args.out, image_size=args.size,
                         num_types=args.num_types, normal_count=args.normal,
                         per_type_count=args.per_type, alpha=args.alpha,
                         train_normal_fraction=args.train_normal_fraction,
                         composite_count=args.composites, seed=args.seed)
    manifest_path, stats = generate_synthetic(config)
    print(f"wrote {manifest_path}")
    for code in sorted(stats["histogram"]):
        print(f"  {code}: {stats['histogram'][code]}")
    total = sum(stats["histogram"].values())
    print(f"  total: {total}")
    print(f"achieved alpha: {stats['achieved_alpha']:.4f}")
    if stats["composite_manifest"]:
        print(f"composites: {stats['composite_manifest']}")
    return 0


def cmd_train(args) -> int:
    config = _build_run_config(args)
    result = train_run(config, resume_path=args.resume)
    print(f"trained {config.training.epochs} epochs;"
          f" checkpoints in {config.out_dir}")
    if result.best_epoch >= 0:
        print(f"best epoch: {result.best_epoch}"
              f" (val mean I-AUROC {result.history[result.best_epoch]['val_mean_i_auroc']:.4f})")
    print(f"best checkpoint: {result.best_path}")
    return 0


def cmd_evaluate(args) -> int:
    report, info = evaluate_run(args.checkpoint, args.manifest,
                                fpr_limit=args.fpr_limit,
                                n_thresholds=args.thresholds)
    if "warning" in info:
        print(f"warning: {info['warning']}", file=sys.stderr)
    print(report.format_table())
    if args.report_out:
        payload = report.to_dict()
        payload["info"] = info
        with open(args.report_out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.report_out}")
    return 0


def cmd_infer(args) -> int:
    results = infer_images(args.checkpoint, args.images, args.out)
    for entry in results:
        scores = " ".join(f"{code}={v:.6f}" for code, v in entry["scores"].items())
        print(f"{entry['image']}: {scores}")
    print(f"heatmaps written to {args.out}")
    return 0


def _parse_quotas(text):
    try:
        quotas = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad quota list {text!r}: {exc}") from exc
    if not quotas or any(q < 1 for q in quotas):
        raise ConfigError("quotas must be positive integers")
    return quotas


def cmd_simulate_epochs(args) -> int:
    if args.quotas:
        quotas = _parse_quotas(args.quotas)
    elif args.manifest:
        from .data import Dataset, load_manifest

        ds = Dataset(load_manifest(args.manifest), "train")
        quotas = [int(g.size) for g in ds.class_indices() if g.size > 0]
    else:
        raise ConfigError("give either --quotas or --manifest")
    est = estimate_epoch_length(quotas, n_trials=args.trials,
                                batch_size=args.batch, seed=args.seed)
    total = sum(quotas)
    std_iters = total / args.batch
    ratio = std_epoch_ratio(est.mu_T_batch, total, args.batch)
    print(f"classes: {len(quotas)}  quotas: {quotas}  total images: {total}")
    print(f"mean draws per balanced epoch: {est.mu_T:.2f} (std {est.std_T:.2f})")
    print(f"balanced iterations (batch {args.batch}): {est.mu_T_batch:.2f}")
    print(f"standard iterations: {std_iters:.2f}")
    print(f"std-epoch equivalent of one balanced epoch: {ratio:.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtfcdd",
        description="Multi-type anomaly detection with per-type heatmaps",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render a synthetic defect dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-types", type=int, default=3)
    p.add_argument("--normal", type=int, default=500)
    p.add_argument("--per-type", type=int, default=67)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--train-normal-fraction", type=float, default=0.8)
    p.add_argument("--composites", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--num-types", type=int)
    p.add_argument("--balanced", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--stages", type=int)
    p.add_argument("--head-blocks", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fpr-limit", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fpr-limit", type=float)
    p.add_argument("--thresholds", type=int)
    p.add_argument("--report-out", help="write the report as JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="score images and export heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="directory for heatmap PNGs")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate-epochs", help="estimate balanced-epoch length")
    p.add_argument("--quotas", help="comma-separated per-class image counts")
    p.add_argument("--manifest", help="derive quotas from a manifest's train split")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate_epochs)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
    )
    try:
        return args.func(args)
    except MtfcddError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
