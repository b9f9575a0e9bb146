"""Generate the synthetic corpus, train phase 1 and report test metrics per modality.

    python scripts/run_phase1.py --out runs/p1 [--config cfg.json] [--seed N]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from trimodal.cli import main


def cli(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/phase1")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args(argv)
    extra = (["--config", args.config] if args.config else []) + (["--seed", str(args.seed)] if args.seed is not None else [])
    out = Path(args.out)
    for cmd in ("gen-synthetic", "train"):
        t0 = time.perf_counter()
        if main([cmd, "--out", str(out), "--overwrite", *extra]):
            return 1
        print(f"{cmd}: {time.perf_counter() - t0:.1f}s")
    for m in ("dense", "sparse", "colbert", "ensemble"):
        if main(["eval", "--out", str(out), "--overwrite", "--modality", m, *extra]):
            return 1
        r = json.loads((out / f"metrics_{m}.json").read_text())
        print(f"{m:9s} R@1 {r['recall_at_1']:.3f}  MRR {r['mrr']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(cli())
