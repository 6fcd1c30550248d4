"""Command-line entry point.

    borelog-refine <stage> --config <file> [--seed N]
                   [--epochs-override N | B/H] [--methods a,b,c] [--out DIR]
                   [--force] [-v]

Stages: extract, denoise, pseudolabel, train, evaluate, ablate, synth,
report. Each stage is resumable and idempotent; outputs embed the config
hash and seed. BORELOG_DATA_ROOT supplies a default data root.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline, report
from .config import ConfigError, load_config
from .intervals import LoadError
from .pipeline import StageError

STAGES = ("extract", "denoise", "pseudolabel", "train", "evaluate", "ablate",
          "synth", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="borelog-refine",
        description="Annotation-free multimodal borehole-image segmentation "
                    "pipeline")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--epochs-override", default=None, metavar="N|B/H",
                        help="replace every training schedule (broad/heavy)")
    parser.add_argument("--methods", default=None,
                        help="comma-separated method subset")
    parser.add_argument("--out", default=None, help="override out_dir")
    parser.add_argument("--force", action="store_true",
                        help="recompute even when artifacts look current; "
                             "report: allow mixing config hashes")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "epochs_override": args.epochs_override,
                 "methods": args.methods, "out_dir": args.out}
    try:
        cfg = load_config(args.config, overrides=overrides)
        if args.stage == "synth":
            pipeline.cmd_synth(cfg)
        elif args.stage == "extract":
            pipeline.cmd_extract(cfg, force=args.force)
        elif args.stage == "denoise":
            pipeline.cmd_denoise(cfg, force=args.force)
        elif args.stage == "pseudolabel":
            pipeline.cmd_pseudolabel(cfg, force=args.force)
        elif args.stage == "train":
            pipeline.cmd_train(cfg, force=args.force)
        elif args.stage == "evaluate":
            pipeline.cmd_evaluate(cfg, force=args.force)
        elif args.stage == "ablate":
            pipeline.cmd_ablate(cfg, force=args.force)
        elif args.stage == "report":
            report.cmd_report(cfg, force=args.force)
    except (ConfigError, StageError, LoadError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
