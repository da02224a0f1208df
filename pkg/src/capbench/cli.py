"""``capbench`` command line: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import STAGES, ConfigError, Run, RunConfig, StageError, default_config

log = logging.getLogger("capbench")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config (default: desk preset)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--single-thread", action="store_true",
                        help="one torch thread, deterministic kernels, serial probing")
    common.add_argument("--skip-bad", action="store_true",
                        help="skip unreadable WAV files during ingest instead of failing")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("--force", action="store_true", help="rerun even if outputs are current")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="capbench", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate or ingest task corpora",
        "pretrain": "masked contrastive pretraining for every configured model",
        "extract": "per-layer clip embeddings under each window policy",
        "probe": "dev-selected linear probes for every task, layer and window",
        "analyze": "layer CKA grids and attention distances",
        "report": "headline tables, context sweep, disagreement and layer curves",
        "run": "all stages in order, skipping those already current",
    }
    for name in (*STAGES, "run"):
        sub.add_parser(name, parents=[common], help=helps[name])
    sub.add_parser("dump-config", parents=[common], help="print the resolved config as JSON")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.command == "dump-config":
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    run = Run(cfg, single_thread=args.single_thread, skip_bad=args.skip_bad)
    if args.command == "run":
        result = run.run(force=args.force)
        for s in result.stages:
            print(f"{s.stage:9s} {s.status:8s} {s.seconds:8.1f}s")
        if not result.ok:
            failed = next(s for s in result.stages if s.status == "failed")
            print(f"stage {failed.stage} failed: {failed.error}", file=sys.stderr)
            return 1
        print(f"report: {run.out / 'report' / 'report.md'}")
        return 0
    try:
        res = run.run_stage(args.command, force=args.force)
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 1
    print(f"{res.stage} {res.status} ({res.seconds:.1f}s)")
    for o in res.outputs:
        print(f"  {o}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
