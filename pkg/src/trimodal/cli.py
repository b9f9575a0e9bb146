"""Command-line entry point.

    trimodal gen-synthetic --out runs/a
    trimodal train         --out runs/a        # phase 1 -> phase1.ckpt
    trimodal distill       --out runs/a        # phase 2 -> phase2.ckpt
    trimodal eval          --out runs/a --modality ensemble
    trimodal index-build   --out runs/a
    trimodal index-query   --out runs/a --k 10
    trimodal rag-eval      --out runs/a --k 1
    trimodal grad-check    --out runs/a

Every command reads ``--config`` (JSON, see ``trimodal.config``) and writes
into ``--out``. Existing outputs are never replaced unless ``--overwrite`` is
given. Exit codes: 0 success, 1 usage or configuration, 2 data or I/O error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .data import read_jsonl, read_records, read_triplets, to_distill_text, write_jsonl, write_records
from .encoder import dense_embeddings, init_encoder, load_checkpoint, save_checkpoint
from .errors import DataError, NumericError
from .evaluation import evaluate
from .gradcheck import grad_check
from .hnsw import Index, IndexedVector, load_index, save_index
from .rag import NoteRecord, RagQuery, ingest_notes, rag_evaluate
from .scoring import MODALITIES
from .synthetic import gen_synthetic
from .tokenize import Vocab, tokenize
from .trainer import distill_eval, distill_objective, train_phase1, train_phase2

log = logging.getLogger("trimodal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- small helpers ---------------------------------------------------------------


def _dump(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _claim(out: Path, names: Sequence[str], overwrite: bool) -> List[Path]:
    paths = [out / n for n in names]
    taken = [str(p) for p in paths if p.exists()]
    if taken and not overwrite:
        raise UsageError(f"refusing to overwrite {', '.join(taken)} (pass --overwrite)")
    return paths


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _data_dir(out: Path) -> Path:
    return _need(out / "data", "data directory (run gen-synthetic first)")


def _vocab(out: Path) -> Vocab:
    return Vocab.load(_need(_data_dir(out) / "vocab.json", "vocabulary"))


def _load_ckpt(path: Path):
    params, vocab, extra = load_checkpoint(_need(path, "checkpoint"))
    if vocab is None:
        raise DataError(f"{path}: checkpoint carries no vocabulary")
    return params, vocab, extra


def _notes(path: Path) -> List[NoteRecord]:
    return [NoteRecord(d["patient_id"], d["category"], d["text"]) for d in read_jsonl(path)]


def _queries(path: Path) -> List[RagQuery]:
    return [RagQuery(d["query"], d["patient_id"], tuple(d["gold_categories"])) for d in read_jsonl(path)]


# --- commands ----------------------------------------------------------------------


def cmd_gen_synthetic(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    names = ["config.json"] + [f"data/{n}" for n in ("train.jsonl", "test.jsonl", "distill.jsonl", "distill_heldout.jsonl", "notes.jsonl", "queries.jsonl", "vocab.json")]
    paths = dict(zip(names, _claim(out, names, args.overwrite)))
    corpus = gen_synthetic(cfg.synthetic)
    (out / "data").mkdir(parents=True, exist_ok=True)
    _dump(paths["config.json"], cfg.to_json())
    write_records(paths["data/train.jsonl"], corpus.train)
    write_records(paths["data/test.jsonl"], corpus.test)
    write_records(paths["data/distill.jsonl"], corpus.distill_records)
    write_records(paths["data/distill_heldout.jsonl"], corpus.distill_heldout_records)
    write_jsonl(paths["data/notes.jsonl"], ({"patient_id": n.patient_id, "category": n.category, "text": n.text} for n in corpus.notes))
    write_jsonl(paths["data/queries.jsonl"], ({"query": q.query, "patient_id": q.patient_id, "gold_categories": list(q.gold_categories)} for q in corpus.queries))
    Vocab.build(corpus.all_texts()).save(paths["data/vocab.json"])
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test triplets, {len(corpus.notes)} notes to {out / 'data'}")


def cmd_train(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    ckpt, logp = _claim(out, ["phase1.ckpt", "phase1_log.jsonl"], args.overwrite)
    data = _data_dir(out)
    vocab = _vocab(out)
    train = read_triplets(_need(data / "train.jsonl", "training triplets"))
    params = init_encoder(cfg.encoder_config(len(vocab)))
    params, trainlog = train_phase1(params, train, vocab, cfg.phase1())
    save_checkpoint(ckpt, params, vocab, {"phase": 1, "config": cfg.to_dict()})
    trainlog.write(logp)
    last = trainlog.records[-1].values if trainlog.records else {}
    print(f"phase 1: {len(trainlog.records)} steps, final batch L_final={last.get('final', float('nan')):.4f} -> {ckpt}")


def cmd_distill(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    ckpt, logp, rep = _claim(out, ["phase2.ckpt", "phase2_log.jsonl", "distill_report.json"], args.overwrite)
    data = _data_dir(out)
    teacher, vocab, _ = _load_ckpt(Path(args.checkpoint) if args.checkpoint else out / "phase1.ckpt")
    texts = [to_distill_text(r) for r in read_records(_need(data / "distill.jsonl", "distillation texts"))]
    held = [to_distill_text(r) for r in read_records(_need(data / "distill_heldout.jsonl", "held-out distillation texts"))]
    student = init_encoder(cfg.encoder_config(len(vocab), cfg.seed + cfg.student_seed_offset))
    t_train = dense_embeddings(teacher, [tokenize(t.text, vocab) for t in texts])
    t_held = dense_embeddings(teacher, [tokenize(t.text, vocab) for t in held])
    plain = [t.text for t in texts]
    before = distill_objective(student, t_train, plain, vocab, cfg.loss)
    student, trainlog = train_phase2(student, None, texts, vocab, cfg.phase2(), teacher_embeddings=t_train)
    after = distill_objective(student, t_train, plain, vocab, cfg.loss)
    report = {
        "total_step0": before["distill_total"],
        "total_final": after["distill_total"],
        "reduction": 1.0 - after["distill_total"] / before["distill_total"],
        "terms_step0": before,
        "terms_final": after,
        "heldout_mean_cosine": distill_eval(student, t_held, [t.text for t in held], vocab),
        "steps": len(trainlog.records),
    }
    save_checkpoint(ckpt, student, vocab, {"phase": 2, "config": cfg.to_dict()})
    trainlog.write(logp)
    _dump(rep, _json(report))
    print(f"phase 2: total {report['total_step0']:.4f} -> {report['total_final']:.4f}, held-out cosine {report['heldout_mean_cosine']:.4f}")


def cmd_eval(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    modality = args.modality or "ensemble"
    js, txt = _claim(out, [f"metrics_{modality}.json", f"metrics_{modality}.txt"], args.overwrite)
    params, vocab, _ = _load_ckpt(Path(args.checkpoint) if args.checkpoint else out / "phase1.ckpt")
    test = read_triplets(_need(_data_dir(out) / "test.jsonl", "test triplets"))
    strata = [f"cluster{t.meta['cluster']}" if t.meta and "cluster" in t.meta else None for t in test]
    report = evaluate(params, vocab, test, cfg.weights, modality, strata if all(strata) else None)
    _dump(js, report.to_json())
    _dump(txt, report.table())
    print(report.table(), end="")


def _passages(out: Path) -> List[str]:
    test = read_triplets(_need(_data_dir(out) / "test.jsonl", "test triplets"))
    return sorted({x for t in test for x in (t.positive, *t.negatives)})


def cmd_index_build(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    ipath, tpath = _claim(out, ["index.bin", "index_texts.jsonl"], args.overwrite)
    params, vocab, _ = _load_ckpt(Path(args.checkpoint) if args.checkpoint else out / "phase1.ckpt")
    texts = _passages(out)
    emb = dense_embeddings(params, [tokenize(t, vocab) for t in texts])
    ids = [f"p{i:06d}" for i in range(len(texts))]
    index = Index(cfg.index_params())
    index.add([IndexedVector(i, e) for i, e in zip(ids, emb)])
    save_index(index, ipath)
    write_jsonl(tpath, ({"id": i, "text": t} for i, t in zip(ids, texts)))
    print(f"indexed {len(index)} passages -> {ipath}")


def cmd_index_query(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    (rpath,) = _claim(out, ["index_query.jsonl"], args.overwrite)
    params, vocab, _ = _load_ckpt(Path(args.checkpoint) if args.checkpoint else out / "phase1.ckpt")
    index = load_index(_need(out / "index.bin", "index file"))
    texts = {d["id"]: d["text"] for d in read_jsonl(_need(out / "index_texts.jsonl", "index text table"))}
    test = read_triplets(_need(_data_dir(out) / "test.jsonl", "test triplets"))
    k = args.k or 10
    qs = dense_embeddings(params, [tokenize(t.query, vocab) for t in test])
    rows = []
    for t, q in zip(test, qs):
        hits = index.search(q, k, max(cfg.index.ef_search, k))
        rows.append({"query": t.query, "hits": [{"id": i, "score": s, "positive": texts[i] == t.positive} for i, s in hits]})
    write_jsonl(rpath, rows)
    found = np.mean([any(h["positive"] for h in r["hits"]) for r in rows])
    print(f"{len(rows)} queries, positive within top-{k}: {found:.3f}")


def cmd_rag_eval(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    k = args.k or cfg.rag.k
    data = _data_dir(out)
    notes = _notes(_need(data / "notes.jsonl", "notes"))
    patients = sorted({n.patient_id for n in notes})
    names = ["rag_report.json", "rag_report.txt"] + [f"rag_index/{p}.bin" for p in patients]
    paths = _claim(out, names, args.overwrite)
    params, vocab, _ = _load_ckpt(Path(args.checkpoint) if args.checkpoint else out / "phase1.ckpt")
    queries = _queries(_need(data / "queries.jsonl", "queries"))
    store = ingest_notes(notes, replace(cfg.rag_params(), k=k), params, vocab)
    report = rag_evaluate(store, queries, k)
    _dump(paths[0], report.to_json())
    _dump(paths[1], report.table())
    (out / "rag_index").mkdir(parents=True, exist_ok=True)
    for p, path in zip(patients, paths[2:]):
        save_index(store.patients[p].index, path)
    print(f"mean IoU {report.mean_iou:.4f} over {len(queries)} queries (k={k})")


def cmd_grad_check(cfg: PipelineConfig, args) -> None:
    out = Path(args.out)
    (path,) = _claim(out, ["grad_check.json"], args.overwrite)
    result = grad_check(seed=cfg.seed)
    _dump(path, _json(result.to_dict()))
    print(f"max relative error {result.max_error:.3e}; zero-gradient tensors within {result.zeros_ok}")
    if not result.passed():
        raise NumericError(f"gradient check failed: max relative error {result.max_error:.3e}")


COMMANDS: Dict[str, Callable] = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "index-build": cmd_index_build,
    "index-query": cmd_index_query,
    "rag-eval": cmd_rag_eval,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trimodal", description="Tri-modal retrieval encoder: data, training, evaluation, indexing.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="overrides the config's top-level seed")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--modality", choices=MODALITIES, help="ranking modality for eval")
    p.add_argument("--k", type=int, help="result depth for index-query and rag-eval")
    p.add_argument("--checkpoint", help="encoder checkpoint (default: <out>/phase1.ckpt)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help or a usage error
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        if args.k is not None and args.k < 1:
            raise UsageError("--k must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as e:
        print(f"trimodal {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"trimodal {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError) as e:
        print(f"trimodal {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
