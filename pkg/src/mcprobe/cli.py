"""Command-line entry point: ``mcprobe <subcommand> --config run.json``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import List, Optional

from .errors import McProbeError, StageError
from .pipeline import STAGES, ExperimentConfig, run_experiment

log = logging.getLogger("mcprobe")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcprobe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--alpha", type=float, help="push magnitude for alter-eval")
        sp.add_argument("--iters", type=int, help="fixed number of INLP iterations")
        sp.add_argument("--topk", type=int, help="K for MLM top-K during selection")

    run = sub.add_parser("run", help="run every stage, or only --stage")
    common(run)
    run.add_argument("--stage", choices=STAGES, action="append", help="restrict to this stage (repeatable)")
    for stage in STAGES:
        common(sub.add_parser(stage, help=f"run the {stage} stage on prior stages' files"))
    show = sub.add_parser("show-config", help="print the effective config as JSON")
    common(show)
    return p


def _config(args) -> ExperimentConfig:
    obj = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            obj = json.load(fh)
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.out is not None:
        obj["out_dir"] = args.out
    if args.topk is not None:
        obj["topk"] = args.topk
    return ExperimentConfig.from_dict(obj)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"mcprobe: [config] {exc}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        print(json.dumps(config.to_dict(), indent=2, ensure_ascii=False))
        return 0
    stages = args.stage if args.command == "run" else [args.command]
    try:
        manifest = run_experiment(config, stages=stages, alpha=args.alpha, iterations=args.iters, topk=args.topk)
    except StageError as exc:
        print(f"mcprobe: {exc}", file=sys.stderr)
        return 1
    except McProbeError as exc:
        print(f"mcprobe: [{'/'.join(stages)}] {exc}", file=sys.stderr)
        return 1
    log.info("wrote %d files to %s", len(manifest["files"]), config.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
