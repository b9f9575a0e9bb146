"""Distill the phase-1 encoder into a fresh student and print the report.

Expects a directory already holding the phase-1 run (see run_phase1.py).

    python scripts/run_phase2.py --out runs/p1
"""

import argparse
import json
import sys
import time

from trimodal.cli import main


def cli(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/phase1")
    ap.add_argument("--config")
    args = ap.parse_args(argv)
    extra = ["--config", args.config] if args.config else []
    t0 = time.perf_counter()
    if main(["distill", "--out", args.out, "--overwrite", *extra]):
        return 1
    rep = json.loads(open(f"{args.out}/distill_report.json").read())
    print(f"distill: {time.perf_counter() - t0:.1f}s")
    print(f"total {rep['total_step0']:.4f} -> {rep['total_final']:.4f} (reduction {rep['reduction']:.3f})")
    print(f"held-out mean cosine {rep['heldout_mean_cosine']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(cli())
