"""Category-tagged note retrieval: splitting, per-patient indexing, IoU scoring."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .encoder import EncoderParams, dense_embeddings, encode
from .errors import DataError
from .hnsw import Index, IndexedVector, IndexParams, exact_search
from .scoring import EnsembleWeights, score_pair
from .tokenize import Vocab, split_words, tokenize

CATEGORIES = (
    "cc", "CurrentMeds", "PastHistory", "Allergies", "vitals2BR", "PhysicalExamination", "Treatment",
    "Immunization", "Procedure", "SurgicalHistory", "Hospitalization", "FamilyHistory", "SocialHistory",
    "ros", "hpi", "assessment", "ClinicalNotes", "Injection", "labs", "PastOrders", "Preventive",
)  # fmt: skip

SEPARATORS = ("\n\n", "\n", ". ", " ", "")


def token_count(text: str) -> int:
    return len(split_words(text))


# --- splitting -----------------------------------------------------------------


def split_with_delimiters(
    text: str,
    max_tokens: int = 1500,
    separators: Sequence[str] = SEPARATORS,
    count: Callable[[str], int] = token_count,
) -> Tuple[List[str], List[str]]:
    """Recursive splitter that also reports what it consumed.

    Returns ``(chunks, joins)`` with ``len(joins) == len(chunks) - 1`` and
    ``chunks[0] + joins[0] + chunks[1] + ... == text``. The coarsest separator
    that occurs is tried first; neighbouring pieces are merged greedily while
    the merged piece stays within ``max_tokens``; pieces still over the cap
    are split again with the next separator. The empty separator means
    character level, where every piece holds at most one token.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if not text:
        return [], []
    if not separators or separators[-1] != "":
        separators = tuple(separators) + ("",)
    return _split(text, tuple(separators), max_tokens, count)


def _split(text: str, seps: Tuple[str, ...], cap: int, count: Callable[[str], int]) -> Tuple[List[str], List[str]]:
    if count(text) <= cap:
        return [text], []
    sep, rest = seps[0], seps[1:]
    parts = list(text) if sep == "" else text.split(sep)
    if len(parts) == 1:
        return _split(text, rest, cap, count)
    chunks: List[str] = []
    joins: List[str] = []

    def emit(cs: List[str], js: List[str]) -> None:
        if chunks:
            joins.append(sep)
        chunks.extend(cs)
        joins.extend(js)

    cur: Optional[str] = None
    for part in parts:
        if count(part) > cap:
            if cur is not None:
                emit([cur], [])
                cur = None
            emit(*_split(part, rest, cap, count))
        elif cur is None:
            cur = part
        elif count(cur + sep + part) <= cap:
            cur = cur + sep + part
        else:
            emit([cur], [])
            cur = part
    if cur is not None:
        emit([cur], [])
    return chunks, joins


def split_text(text: str, max_tokens: int = 1500, separators: Sequence[str] = SEPARATORS) -> List[str]:
    return split_with_delimiters(text, max_tokens, separators)[0]


def reconstruct(chunks: Sequence[str], joins: Sequence[str]) -> str:
    if len(joins) != max(len(chunks) - 1, 0):
        raise DataError("need exactly one join between consecutive chunks")
    out = [chunks[0]] if chunks else []
    for j, c in zip(joins, chunks[1:]):
        out += [j, c]
    return "".join(out)


# --- records ---------------------------------------------------------------------


@dataclass
class NoteRecord:
    patient_id: str
    category: str
    text: str

    def __post_init__(self) -> None:
        if not self.patient_id:
            raise DataError("note with empty patient id")
        if not self.text:
            raise DataError(f"note for {self.patient_id}/{self.category} has empty text")


@dataclass
class RagQuery:
    query: str
    patient_id: str
    gold_categories: Tuple[str, ...]

    def __post_init__(self) -> None:
        self.gold_categories = tuple(self.gold_categories)
        if not self.gold_categories:
            raise DataError("query needs a non-empty gold category set")
        bad = [c for c in self.gold_categories if c not in CATEGORIES]
        if bad:
            raise DataError(f"unknown categories {bad}")


@dataclass
class Chunk:
    patient_id: str
    category: str
    seq: int
    text: str
    n_tokens: int
    embedding: np.ndarray = field(repr=False)

    @property
    def id(self) -> str:
        return f"{self.patient_id}_{self.category}_chunk{self.seq}"


@dataclass
class RagParams:
    max_tokens: int = 100
    k: int = 5
    index: IndexParams = IndexParams()
    rerank: Optional[str] = None  # non-default extension: sparse/colbert/ensemble re-ranking
    rerank_pool: int = 20


@dataclass
class PatientStore:
    chunks: Dict[str, Chunk]
    index: Index


@dataclass
class ChunkStore:
    params: RagParams
    encoder: EncoderParams
    vocab: Vocab
    patients: Dict[str, PatientStore]

    def chunk(self, chunk_id: str) -> Chunk:
        for p in self.patients.values():
            if chunk_id in p.chunks:
                return p.chunks[chunk_id]
        raise KeyError(chunk_id)


def _embed(encoder: EncoderParams, vocab: Vocab, texts: Sequence[str], ids: Sequence[str]) -> np.ndarray:
    seqs = [tokenize(t, vocab) for t in texts]
    try:
        return dense_embeddings(encoder, seqs)
    except DataError:
        for s, cid in zip(seqs, ids):
            try:
                dense_embeddings(encoder, [s])
            except DataError as e:
                raise DataError(f"chunk {cid}: {e}") from None
        raise


def ingest_notes(records: Sequence[NoteRecord], params: RagParams, encoder: EncoderParams, vocab: Vocab) -> ChunkStore:
    """Split every note, embed each chunk, and build one index per patient."""
    pending: Dict[str, List[Tuple[str, str, str]]] = {}
    seq: Dict[Tuple[str, str], int] = {}
    for i, rec in enumerate(records):
        if rec.category not in CATEGORIES:
            raise DataError(f"record {i}: unknown category {rec.category!r}")
        for text in split_text(rec.text, params.max_tokens):
            n = seq.get((rec.patient_id, rec.category), 0)
            seq[(rec.patient_id, rec.category)] = n + 1
            pending.setdefault(rec.patient_id, []).append((rec.category, str(n), text))
    patients: Dict[str, PatientStore] = {}
    iparams = IndexParams(**{**params.index.__dict__, "dim": encoder.config.dim})
    for pid in sorted(pending):
        rows = pending[pid]
        ids = [f"{pid}_{cat}_chunk{n}" for cat, n, _ in rows]
        emb = _embed(encoder, vocab, [t for _, _, t in rows], ids)
        chunks = {
            cid: Chunk(pid, cat, int(n), text, token_count(text), e)
            for cid, (cat, n, text), e in zip(ids, rows, emb)
        }
        index = Index(iparams)
        index.add([IndexedVector(cid, e) for cid, e in zip(ids, emb)])
        patients[pid] = PatientStore(chunks, index)
    return ChunkStore(params, encoder, vocab, patients)


def rag_query(store: ChunkStore, q: RagQuery, k: Optional[int] = None, exact: bool = False) -> Tuple[List[Chunk], frozenset]:
    """Top-``k`` chunks of the query's patient and the set of their categories."""
    k = store.params.k if k is None else k
    if q.patient_id not in store.patients:
        raise DataError(f"unknown patient {q.patient_id!r}")
    ps = store.patients[q.patient_id]
    qv = _embed(store.encoder, store.vocab, [q.query], ["<query>"])[0]
    rerank = store.params.rerank
    depth = max(k, store.params.rerank_pool) if rerank else k
    if exact:
        hits = exact_search(ps.index, qv, depth)
    else:
        hits = ps.index.search(qv, depth, max(store.params.index.ef_search, depth))
    if rerank:
        qr = encode(store.encoder, tokenize(q.query, store.vocab))
        seqs = {cid: encode(store.encoder, tokenize(ps.chunks[cid].text, store.vocab)) for cid, _ in hits}
        scored = [(cid, score_pair(qr, seqs[cid], EnsembleWeights()).get(rerank)) for cid, _ in hits]
        hits = sorted(scored, key=lambda h: (-h[1], h[0]))
    got = [ps.chunks[cid] for cid, _ in hits[:k]]
    return got, frozenset(c.category for c in got)


def category_iou(gold: Sequence[str], retrieved: Sequence[str]) -> float:
    g, r = set(gold), set(retrieved)
    if not g:
        raise DataError("gold category set must be non-empty")
    return len(g & r) / len(g | r)


@dataclass
class RagReport:
    k: int
    mean_iou: float
    per_query: List[dict]

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "mean_iou": self.mean_iou, "per_query": self.per_query}, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = [f"queries={len(self.per_query)} k={self.k} mean IoU={self.mean_iou:.4f}"]
        for r in self.per_query:
            lines.append(f"  {r['index']:>4} {r['patient_id']:<12} IoU={r['iou']:.3f} R={','.join(r['retrieved_categories'])}")
        return "\n".join(lines) + "\n"


def rag_evaluate(store: ChunkStore, queries: Sequence[RagQuery], k: Optional[int] = None, exact: bool = False) -> RagReport:
    if not queries:
        raise DataError("no queries to evaluate")
    k = store.params.k if k is None else k
    rows = []
    for i, q in enumerate(queries):
        try:
            got, cats = rag_query(store, q, k, exact)
        except DataError as e:
            raise DataError(f"query {i}: {e}") from None
        rows.append(
            {
                "index": i,
                "patient_id": q.patient_id,
                "query": q.query,
                "gold_categories": sorted(q.gold_categories),
                "retrieved": [c.id for c in got],
                "retrieved_categories": sorted(cats),
                "iou": category_iou(q.gold_categories, cats),
            }
        )
    return RagReport(k, float(np.mean([r["iou"] for r in rows])), rows)
