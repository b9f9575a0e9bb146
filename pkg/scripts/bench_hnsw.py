"""HNSW recall and speed against exact search on random unit vectors.

Sweeps ef_search and reports recall@10, query time relative to brute force,
and the smallest ef reaching the target recall.

    python scripts/bench_hnsw.py [--n 10000] [--dim 64] [--queries 1000]
"""

import argparse
import time

import numpy as np

from trimodal.hnsw import IndexedVector, IndexParams, build_index, exact_search


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cli(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--M", type=int, default=16)
    ap.add_argument("--ef-construction", type=int, default=200)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)

    rng = np.random.Generator(np.random.PCG64(args.seed))
    data, queries = unit_rows(rng, args.n, args.dim), unit_rows(rng, args.queries, args.dim)
    params = IndexParams(dim=args.dim, M=args.M, ef_construction=args.ef_construction)
    t0 = time.perf_counter()
    index = build_index([IndexedVector(f"v{i:06d}", v) for i, v in enumerate(data)], params)
    print(f"build: {time.perf_counter() - t0:.1f}s for {args.n} vectors")

    t0 = time.perf_counter()
    truth = [{i for i, _ in exact_search(index, q, 10)} for q in queries]
    t_exact = time.perf_counter() - t0

    reached = None
    for ef in (16, 32, 64, 96, 128, 192, 256, 384, 512):
        t0 = time.perf_counter()
        found = [index.search(q, 10, ef) for q in queries]
        dt = time.perf_counter() - t0
        recall = sum(len(t & {i for i, _ in f}) for t, f in zip(truth, found)) / (10 * len(queries))
        print(f"ef={ef:4d}  recall@10 {recall:.4f}  query time {dt / t_exact:.2f}x exact")
        if reached is None and recall >= args.target:
            reached = ef
    print(f"smallest ef with recall >= {args.target}: {reached}")


if __name__ == "__main__":
    cli()
