"""Dense, lexical-overlap, late-interaction and ensemble relevance scores.

The plain functions score a single query/candidate pair of
:class:`~trimodal.encoder.MultiRepresentation`. The ``*_t`` functions are the
batched, differentiable counterparts used by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import torch

from .encoder import Encoded, MultiRepresentation
from .errors import DataError
from .tokenize import UNK_ID

MODALITIES = ("dense", "sparse", "colbert", "ensemble")


@dataclass(frozen=True)
class EnsembleWeights:
    w1: float = 1.0
    w2: float = 0.3
    w3: float = 1.0

    def __post_init__(self) -> None:
        if not all(np.isfinite([self.w1, self.w2, self.w3])):
            raise DataError("ensemble weights must be finite")

    def scaled(self, c: float) -> "EnsembleWeights":
        return EnsembleWeights(self.w1 * c, self.w2 * c, self.w3 * c)


@dataclass(frozen=True)
class ScoreBreakdown:
    s_dense: float
    s_sparse: float
    s_colbert: float
    s_ensemble: float

    def get(self, modality: str) -> float:
        return getattr(self, "s_" + modality)


def dense_score(q: MultiRepresentation, p: MultiRepresentation) -> float:
    if q.dense.shape != p.dense.shape:
        raise DataError(f"dense dimension mismatch: {q.dense.shape} vs {p.dense.shape}")
    return float(np.dot(q.dense, p.dense))


def _max_weights(rep: MultiRepresentation) -> Dict[str, float]:
    # repeated token strings collapse to their largest weight
    out: Dict[str, float] = {}
    for tok, w in zip(rep.tokens, rep.lexical_weights):
        w = float(w)
        if w > out.get(tok, -1.0):
            out[tok] = w
    return out


def sparse_score(q: MultiRepresentation, p: MultiRepresentation) -> float:
    wq, wp = _max_weights(q), _max_weights(p)
    if len(wp) < len(wq):
        wq, wp = wp, wq
    return float(sum(w * wp[t] for t, w in wq.items() if t in wp))


def colbert_score(q: MultiRepresentation, p: MultiRepresentation) -> float:
    if len(q.multi_vectors) == 0 or len(p.multi_vectors) == 0:
        raise DataError("late-interaction score is undefined for a zero-token query or passage")
    sim = q.multi_vectors @ p.multi_vectors.T
    return float(sim.max(axis=1).mean())


def ensemble_score(s_dense: float, s_sparse: float, s_colbert: float, w: EnsembleWeights = EnsembleWeights()) -> float:
    return w.w1 * s_dense + w.w2 * s_sparse + w.w3 * s_colbert


def score_pair(q: MultiRepresentation, p: MultiRepresentation, w: EnsembleWeights = EnsembleWeights()) -> ScoreBreakdown:
    d, s, c = dense_score(q, p), sparse_score(q, p), colbert_score(q, p)
    return ScoreBreakdown(d, s, c, ensemble_score(d, s, c, w))


def score_candidates(
    q: MultiRepresentation, cands: Sequence[MultiRepresentation], w: EnsembleWeights = EnsembleWeights()
) -> List[ScoreBreakdown]:
    if not cands:
        raise DataError("score_candidates needs at least one candidate")
    return [score_pair(q, c, w) for c in cands]


# --- batched torch versions ----------------------------------------------------


def lexical_bags(enc: Encoded, vocab_size: int) -> torch.Tensor:
    """(B, V) max lexical weight per vocabulary id; UNK and padding are dropped.

    Distinct unknown words share the UNK id, so they cannot be told apart here;
    excluding UNK keeps this path from matching them to each other.
    """
    weights = enc.lexical * (enc.ids != UNK_ID)
    bags = torch.zeros((enc.ids.shape[0], vocab_size), dtype=weights.dtype)
    return bags.scatter_reduce(1, enc.ids, weights, reduce="amax", include_self=True)


def candidate_scores_t(q: Encoded, c: Encoded, n_cand: int, vocab_size: int, w: EnsembleWeights) -> Dict[str, torch.Tensor]:
    """Scores of each query against its own ``n_cand`` candidates.

    ``q`` holds B queries; ``c`` holds B*n_cand candidates laid out query-major.
    Returns four (B, n_cand) tensors keyed by modality.
    """
    bsz = q.dense.shape[0]
    if c.dense.shape[0] != bsz * n_cand:
        raise DataError("candidate batch does not match query batch")
    if bool((q.mask.sum(1) == 0).any()) or bool((c.mask.sum(1) == 0).any()):
        raise DataError("late-interaction score is undefined for zero-token texts")
    d = q.dense.shape[1]

    c_dense = c.dense.view(bsz, n_cand, d)
    s_dense = torch.einsum("bd,bkd->bk", q.dense, c_dense)

    qb = lexical_bags(q, vocab_size)
    cb = lexical_bags(c, vocab_size).view(bsz, n_cand, vocab_size)
    s_sparse = torch.einsum("bv,bkv->bk", qb, cb)

    nc = c.multi.shape[1]
    c_multi = c.multi.view(bsz, n_cand, nc, d)
    c_mask = c.mask.view(bsz, n_cand, nc)
    sim = torch.einsum("bid,bkjd->bkij", q.multi, c_multi)
    sim = sim.masked_fill(~c_mask[:, :, None, :], float("-inf"))
    best = sim.max(dim=-1).values  # (B, K, Nq)
    qmask = q.mask[:, None, :].to(best.dtype)
    best = torch.where(q.mask[:, None, :], best, torch.zeros_like(best))
    s_colbert = (best * qmask).sum(-1) / qmask.sum(-1)

    s_ens = w.w1 * s_dense + w.w2 * s_sparse + w.w3 * s_colbert
    return {"dense": s_dense, "sparse": s_sparse, "colbert": s_colbert, "ensemble": s_ens}
