"""Command-line front door: ``visreg {train,eval,bounds,repro,export-features}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .agents.common import ConfigError
from .config import PRESETS, ExperimentConfig, load, preset


def _config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.seeds is not None:
        if args.seeds < 0:
            raise ConfigError("--seeds: must be >= 0")
        cfg.analysis.seeds = args.seeds
        cfg.analysis.seeds_per_regime = {}
    return cfg


def _manifest(cfg, args):
    return harness.load_manifest(cfg, args.out)


def cmd_train(args) -> int:
    cfg = _config(args)
    m = harness.run_train(cfg, args.out, args.workers)
    for rec in m["cells"]:
        print(f"{rec['cell']:<32} {rec['status']}" + (f"  {rec['error']}" if "error" in rec else ""))
    return 0 if m["status"] != "error" else 1


def cmd_eval(args) -> int:
    cfg = _config(args)
    res = harness.run_eval(cfg, _manifest(cfg, args), args.out)
    for f in res["files"]:
        print(f)
    for e in res["errors"]:
        print(f"{e['cell']}: {e['error']}", file=sys.stderr)
    return 0 if not res["errors"] else 1


def cmd_bounds(args) -> int:
    cfg = _config(args)
    doc = harness.run_bounds(cfg, _manifest(cfg, args), args.out)
    rows = doc["rows"]
    keys = ["cell", "K", "delta", "tight", "loose", "empirical_gap", "gap_within_tight"]
    print(harness.format_table([{k: r.get(k, "") for k in keys} for r in rows]))
    return 0 if all("error" not in r for r in rows) else 1


def cmd_repro(args) -> int:
    name = args.experiment or args.preset
    if name is None:
        raise ConfigError("repro needs an experiment name")
    cfg = load(args.config) if args.config else None
    summary = harness.run_repro(name, args.out, args.workers, args.seeds, cfg)
    print(harness.format_table(summary["table"]))
    return 0


def cmd_export(args) -> int:
    cfg = _config(args)
    for p in harness.run_export_features(cfg, _manifest(cfg, args), args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visreg", description="Feature-invariance regularization experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="experiment YAML")
        sp.add_argument("--preset", metavar="NAME", choices=PRESETS, help="bundled experiment config")
        sp.add_argument("--out", metavar="DIR", help=f"output root (else ${harness.OUT_ENV}, else config)")
        sp.add_argument("--seeds", type=int, metavar="N", help="override seeds per cell")
        sp.add_argument("--workers", type=int, default=1, metavar="N")

    for name, fn, doc in [("train", cmd_train, "train every (regime, lambda, seed) cell"),
                          ("eval", cmd_eval, "evaluate checkpoints on domain grids"),
                          ("bounds", cmd_bounds, "Lipschitz constants, bounds and return gaps"),
                          ("export-features", cmd_export, "dump feature vectors to CSV")]:
        sp = sub.add_parser(name, help=doc)
        common(sp)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("repro", help="run a bundled experiment end to end")
    sp.add_argument("experiment", nargs="?", choices=PRESETS)
    common(sp)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
