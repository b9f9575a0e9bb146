"""Untrained vs trained encoder on the RAG category-IoU task over a grid of chunk sizes and depths.

Expects a directory holding a phase-1 run (see run_phase1.py).

    python scripts/rag_experiment.py --out runs/p1
"""

import argparse
import dataclasses
import json
from pathlib import Path

from trimodal.config import load_config
from trimodal.encoder import init_encoder, load_checkpoint
from trimodal.rag import NoteRecord, RagQuery, ingest_notes, rag_evaluate
from trimodal.tokenize import Vocab


def read(path, cls):
    return [cls(**json.loads(line)) for line in open(path, encoding="utf-8")]


def cli(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/phase1")
    ap.add_argument("--config")
    args = ap.parse_args(argv)
    out = Path(args.out)
    cfg = load_config(args.config)
    vocab = Vocab.load(out / "data" / "vocab.json")
    notes = read(out / "data" / "notes.jsonl", NoteRecord)
    queries = read(out / "data" / "queries.jsonl", RagQuery)
    encoders = {"untrained": init_encoder(cfg.encoder_config(len(vocab))), "trained": load_checkpoint(out / "phase1.ckpt")[0]}
    base = cfg.rag_params()
    print("max_tokens  k  untrained  trained")
    for max_tokens in (16, 32, 100):
        stores = {n: ingest_notes(notes, dataclasses.replace(base, max_tokens=max_tokens), e, vocab) for n, e in encoders.items()}
        for k in (1, 3, 5):
            iou = {n: rag_evaluate(s, queries, k).mean_iou for n, s in stores.items()}
            print(f"{max_tokens:10d} {k:2d}  {iou['untrained']:9.3f}  {iou['trained']:7.3f}")


if __name__ == "__main__":
    cli()
