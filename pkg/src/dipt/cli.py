"""``dipt <command> --config <path> [--set k=v]... [--seed N] [--workspace dir] [--force]``

Exit status: 0 on success, 1 on a validation error (config, dataset, arguments),
2 on a provenance error (missing upstream artifact, mismatched or modified hashes).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import torch

from .checkpoint import CheckpointError
from .config import ConfigValidationError, load_config
from .data import DatasetError
from .distill import ConfigError, ProvenanceError
from .pipeline import COMMANDS, Workspace, run_all
from .store import StoreError

EXIT_OK, EXIT_VALIDATION, EXIT_PROVENANCE = 0, 1, 2
DEFAULT_WORKSPACE = "workspace"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dipt", description="Domain-invariant prompt tuning and distillation pipeline.")
    parser.add_argument("command", choices=[*COMMANDS, "run"], help="stage to run ('run' chains every stage)")
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set stage1.k=3 (repeatable)")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--workspace", help=f"workspace root (default: $DIPT_WORKSPACE or ./{DEFAULT_WORKSPACE})")
    parser.add_argument("--force", action="store_true", help="rebuild even if existing artifacts disagree")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        root = args.workspace or os.environ.get("DIPT_WORKSPACE") or cfg.workspace or DEFAULT_WORKSPACE
        ws = Workspace(root)
        if args.command == "run":
            outcomes = run_all(cfg, ws, args.force)
        else:
            outcomes = [COMMANDS[args.command](cfg, ws, args.force)]
    except ProvenanceError as exc:
        print(f"dipt: provenance error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except (ConfigValidationError, ConfigError, DatasetError, StoreError, CheckpointError, ValueError) as exc:
        print(f"dipt: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    for outcome in outcomes:
        print(outcome.notice)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
