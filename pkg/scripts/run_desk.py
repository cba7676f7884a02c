"""Run the desk-scale pipeline end to end and print the summary tables.

    python3 scripts/run_desk.py [--out runs/desk] [--seed 0]
"""

import argparse
import sys
import time
from pathlib import Path

from cfmatch.experiment import build_config, run_all


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = build_config("desk", {"out": args.out, "seed": args.seed})
    start = time.perf_counter()
    run_all(cfg, log=lambda msg: print(msg, file=sys.stderr))
    print(Path(args.out, "summary.md").read_text())
    print(f"config {cfg.config_hash()}, {time.perf_counter() - start:.0f}s", file=sys.stderr)


if __name__ == "__main__":
    main()
