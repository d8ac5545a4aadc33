"""Command line entry point: ``zsumlab <subcommand> --config cfg.json ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import (
    ConfigValidationError,
    ExperimentConfig,
    cmd_evaluate,
    cmd_finetune,
    cmd_generate_corpus,
    cmd_pretrain,
    cmd_probe,
    cmd_report,
    parse_directions,
)
from .model import CheckpointFormatError


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if getattr(args, "adv_mode", None):
        overrides["adv"] = {**cfg.to_json()["adv"], "mode": args.adv_mode}
    if getattr(args, "residual_drop", False):
        overrides["residual_drop"] = True
    if getattr(args, "two_step", False):
        overrides["two_step"] = True
    if getattr(args, "name", None):
        overrides["name"] = args.name
    if overrides:
        merged = {**cfg.to_json(), **overrides}
        cfg = ExperimentConfig.from_json(merged)
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsumlab", description="Toy-scale zero-shot crosslingual summarization experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
        sp.add_argument("--seed", type=int, help="overrides the first seed of the config")

    sp = sub.add_parser("generate-corpus", help="write every split of the synthetic corpus as JSONL")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("pretrain", help="denoising pretraining; writes an LZCK1 checkpoint")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = sub.add_parser("finetune", help="finetune a pretrained checkpoint; writes model.ck and manifest.json")
    common(sp)
    sp.add_argument("--base", required=True, help="pretrained checkpoint")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--name", help="run name recorded in the manifest")
    sp.add_argument("--strategy", choices=["full", "encoder", "lna", "qk", "custom"])
    sp.add_argument("--adv-mode", choices=["none", "ce", "balanced"])
    sp.add_argument("--residual-drop", action="store_true")
    sp.add_argument("--two-step", action="store_true")

    sp = sub.add_parser("evaluate", help="decode and score; prints a CSV table")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--directions", help="comma-separated src-tgt codes, e.g. es-en,ru-en (default: config)")
    sp.add_argument("--bootstrap", type=int, help="bootstrap resamples for confidence intervals")
    sp.add_argument("--out", help="CSV path (default: stdout)")

    sp = sub.add_parser("probe", help="fit a fresh language probe on frozen encoder outputs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="JSON path (default: stdout)")

    sp = sub.add_parser("report", help="run the five-row recipe over the seeds; writes CSV tables and figures")
    common(sp)
    sp.add_argument("--workdir", required=True, help="checkpoint and manifest cache")
    sp.add_argument("--out", required=True, help="directory for CSV tables and PNG figures")
    sp.add_argument("--seeds", help="comma-separated seeds (default: config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        seed = _seed(args, cfg)
        if args.command == "generate-corpus":
            for name, path in cmd_generate_corpus(cfg, seed, args.out).items():
                print(f"{name}\t{path}")
        elif args.command == "pretrain":
            print(cmd_pretrain(cfg, seed, args.out))
        elif args.command == "finetune":
            manifest = cmd_finetune(cfg, seed, args.base, args.out)
            print(Path(args.out) / "manifest.json")
            print(f"trainable parameters: {len(manifest.trainable)}")
        elif args.command == "evaluate":
            directions = None if args.directions is None else parse_directions(cfg.family(), args.directions)
            if args.out:
                cmd_evaluate(args.checkpoint, cfg, seed, directions, out_csv=args.out, bootstrap=args.bootstrap)
                print(args.out)
            else:
                import csv

                from .experiments import TABLE_COLUMNS

                rows = cmd_evaluate(args.checkpoint, cfg, seed, directions, bootstrap=args.bootstrap)
                w = csv.DictWriter(sys.stdout, fieldnames=list(TABLE_COLUMNS))
                w.writeheader()
                w.writerows(rows)
        elif args.command == "probe":
            text = cmd_probe(args.checkpoint, cfg, seed).dumps()
            if args.out:
                Path(args.out).write_text(text + "\n", encoding="utf-8")
                print(args.out)
            else:
                print(text)
        elif args.command == "report":
            seeds = None if args.seeds is None else [int(s) for s in args.seeds.split(",") if s.strip()]
            for name, path in cmd_report(cfg, args.workdir, args.out, seeds).items():
                print(f"{name}\t{path}")
    except ConfigValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (CheckpointFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
