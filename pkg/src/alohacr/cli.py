"""``alohacr <command> --config FILE [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import COMMANDS, ConfigError, run_command, write_outputs


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alohacr", description="ALOHA with collision resolution experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment configuration")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--out", default="results", help="output directory (default: results)")
    ap.add_argument("--no-plot", action="store_true", help="write the CSV only")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"alohacr: cannot read config: {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    try:
        text = run_command(args.command, cfg, seed)
        path = write_outputs(args.command, text, args.out, plot=not args.no_plot)
    except ConfigError as exc:
        print(f"alohacr: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"alohacr: cannot write output: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
