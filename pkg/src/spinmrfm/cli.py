"""Command-line interface: ``run``, ``validate`` and ``preset list|show``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import yaml

from .config import KINDS, RunConfig, load_presets, preset_names
from .errors import ConfigError
from .harness import EXIT_CONFIG, EXIT_OK, EXIT_WARNINGS, run, validate


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="YAML run configuration")
    p.add_argument("--preset", metavar="NAME")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--n-traj", type=int, dest="n_traj")
    p.add_argument("--seed", type=int, dest="base_seed")
    p.add_argument("--dt", type=float)
    p.add_argument("--fock", type=int, dest="n_fock")
    p.add_argument("--out", metavar="DIR", dest="out_dir")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinmrfm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="execute an experiment"))
    _add_run_flags(sub.add_parser("validate", help="check a configuration without running it"))
    pre = sub.add_parser("preset", help="inspect parameter presets")
    pre_sub = pre.add_subparsers(dest="preset_command", required=True)
    pre_sub.add_parser("list")
    show = pre_sub.add_parser("show")
    show.add_argument("name")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """File values, then ``SPINMRFM_*`` environment, then command-line flags."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.with_env()
    flags = {k: getattr(args, k) for k in ("preset", "kind", "n_traj", "base_seed", "dt", "n_fock", "out_dir",
                                          "workers")}
    return cfg.with_overrides(**flags)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "preset":
        if args.preset_command == "list":
            for name in preset_names():
                print(f"{name}: {load_presets()[name].get('description', '')}")
            return EXIT_OK
        presets = load_presets()
        if args.name not in presets:
            print(f"unknown preset {args.name!r}; available: {sorted(presets)}", file=sys.stderr)
            return EXIT_CONFIG
        print(yaml.safe_dump({args.name: presets[args.name]}, sort_keys=False), end="")
        return EXIT_OK
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError, TypeError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        diag = validate(cfg)
        print(json.dumps(diag, indent=2, default=str))
        if diag["errors"]:
            return EXIT_CONFIG
        return EXIT_WARNINGS if diag["warnings"] else EXIT_OK
    manifest = run(cfg)
    print(json.dumps({"status": manifest.status, "error": manifest.error, "out_dir": cfg.out_dir,
                      "summary": manifest.summary, "warnings": manifest.warnings}, indent=2, default=str))
    return manifest.status


if __name__ == "__main__":
    sys.exit(main())
