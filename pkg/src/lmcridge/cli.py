"""Command-line entry point: ``lmcridge <subcommand> --config C --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import LMCError
from .experiment import Experiment, ExperimentConfig
from .presets import PRESETS

SUBCOMMANDS = {
    "train": ("train",),
    "fork": ("train", "fork"),
    "barrier": ("train", "fork", "barrier", "compare"),
    "predict": ("train", "fork", "predict", "compare"),
    "layerwise": ("train", "fork", "layerwise"),
    "geometry": ("train", "fork", "geometry", "evolution"),
    "toy": ("toy",),
    "report": ("train", "fork", "barrier", "predict", "layerwise", "geometry", "evolution",
               "compare", "toy"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmcridge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True,
                       help="JSON experiment config, or preset:NAME (%s)" % ", ".join(PRESETS))
        s.add_argument("--out", help="run directory (default: config output_dir)")
        s.add_argument("--seed-override", type=int, default=None,
                       help="replace the training seed (init and parent shuffles)")
        g = s.add_mutually_exclusive_group()
        g.add_argument("--resume", action="store_true", help="reuse checkpoints of a partial run")
        g.add_argument("--overwrite", action="store_true", help="discard any previous run")
        s.add_argument("--svg", action="store_true", help="also render SVG plots")
        s.add_argument("-v", "--verbose", action="store_true")
    dump = sub.add_parser("preset", help="print a preset config as JSON")
    dump.add_argument("name", choices=sorted(PRESETS))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "preset":
        from .presets import preset
        print(json.dumps(preset(args.name), indent=2, sort_keys=True))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
        if args.svg:
            cfg.analysis["svg"] = True
        out = args.out or cfg.output_dir
        if out is None:
            print("error: no --out given and config has no output_dir", file=sys.stderr)
            return 2
        manifest = Experiment(cfg, out, args.resume, args.overwrite).run(SUBCOMMANDS[args.command])
    except (LMCError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for note in manifest["notes"]:
        print(f"warning: {note}", file=sys.stderr)
    print(f"{out}: config {manifest['config_hash']}, results {manifest['result_hash']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
