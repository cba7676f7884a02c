"""Command line entry point: ``cfmatch generate|make-targets|train|evaluate|report|all``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as ex

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

STAGES = {
    "generate": ex.cmd_generate,
    "make-targets": ex.cmd_make_targets,
    "train": ex.cmd_train,
    "evaluate": ex.cmd_evaluate,
    "report": ex.cmd_report,
    "all": ex.run_all,
}


def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        return tomllib.loads(text)
    return json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfmatch", description="Counterfactually harmless matching experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or TOML file overriding the preset")
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        if name in ("generate", "all"):
            g = p.add_argument_group("data generation")
            g.add_argument("--stats-dir")
            g.add_argument("--pools", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
            g.add_argument("--pool-size", type=int)
            g.add_argument("--locations", type=int)
            g.add_argument("--sigma2", type=float)
            for r in "acesb":
                g.add_argument(f"--rho-{r}", type=float)
        if name in ("make-targets", "train", "evaluate", "all"):
            p.add_argument("--eps", type=float, nargs="+", help="epsilon grid")
    return ap


def config_from_args(args) -> ex.ExperimentConfig:
    overrides = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    data = dict(overrides.get("data", {}))
    if getattr(args, "stats_dir", None):
        data["stats_dir"] = args.stats_dir
    if getattr(args, "pools", None):
        data["n_train"], data["n_val"], data["n_test"] = args.pools
    for key, attr in (("pool_size", "pool_size"), ("locations", "locations"), ("sigma2", "sigma2")):
        if getattr(args, attr, None) is not None:
            data[key] = getattr(args, attr)
    rho = dict(data.get("rho", {}))
    for r in "acesb":
        value = getattr(args, f"rho_{r}", None)
        if value is not None:
            rho[r] = value
    if rho:
        data["rho"] = rho
    if data:
        overrides["data"] = data
    if "locations" in data:
        overrides.setdefault("model", {})["k"] = data["locations"]
    if getattr(args, "eps", None):
        overrides["eps_grid"] = args.eps
    return ex.build_config(args.preset, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ValueError, TypeError, OSError, tomllib.TOMLDecodeError) as exc:
        print(json.dumps({"error": "config", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    log = (lambda msg: print(msg, file=sys.stderr)) if args.command in ("train", "all") else None
    try:
        if args.command in ("train", "all"):
            result = STAGES[args.command](cfg, log)
        else:
            result = STAGES[args.command](cfg)
    except Exception as exc:  # reported as JSON for the calling harness
        print(json.dumps({"error": args.command, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "config_hash": cfg.config_hash(), "out": cfg.out,
                      "result": result}, default=str, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
