"""Ranking metrics over held-out triplets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import TripletExample
from .encoder import EncoderParams, encode_batch
from .errors import DataError
from .scoring import MODALITIES, EnsembleWeights, ScoreBreakdown, score_candidates
from .stats import confidence_interval
from .tokenize import Vocab, tokenize


def rank_positive(scores: Sequence[float], positive: int = 0) -> int:
    """1-based rank of the positive; ties count against it."""
    if len(scores) != 6:
        raise DataError(f"expected 6 candidate scores, got {len(scores)}")
    pos = scores[positive]
    return 1 + sum(1 for i, s in enumerate(scores) if i != positive and s >= pos)


def rank_from_breakdowns(cands: Sequence[ScoreBreakdown], modality: str = "ensemble", positive: int = 0) -> int:
    return rank_positive([c.get(modality) for c in cands], positive)


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(ranks):
        raise DataError("recall@k of an empty rank list")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mrr(ranks: Sequence[int]) -> float:
    if not len(ranks):
        raise DataError("MRR of an empty rank list")
    return sum(1.0 / r for r in ranks) / len(ranks)


@dataclass
class RankingResult:
    rank: int
    stratum: Optional[str] = None


@dataclass
class MetricsReport:
    n: int
    modality: str
    accuracy: float
    std_dev: float
    recall_at_1: float
    recall_at_3: float
    recall_at_5: float
    mrr: float
    ci95: Dict[str, List[float]] = field(default_factory=dict)
    strata: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [
            ("Accuracy", self.accuracy),
            ("Std Dev", self.std_dev),
            ("Recall@1", self.recall_at_1),
            ("Recall@3", self.recall_at_3),
            ("Recall@5", self.recall_at_5),
            ("MRR", self.mrr),
        ]
        lines = [f"{'metric':<10} {'value':>8}  95% CI", "-" * 36]
        for name, val in rows:
            key = {"Recall@1": "recall_at_1", "Recall@3": "recall_at_3", "Recall@5": "recall_at_5", "MRR": "mrr", "Accuracy": "accuracy"}.get(name)
            ci = self.ci95.get(key) if key else None
            ci_s = f"[{ci[0]:.4f}, {ci[1]:.4f}]" if ci else ""
            lines.append(f"{name:<10} {val:8.4f}  {ci_s}")
        for s, m in sorted(self.strata.items()):
            lines.append(f"  {s:<20} n={int(m['n']):<5} R@1={m['recall_at_1']:.4f} MRR={m['mrr']:.4f}")
        return "\n".join(lines) + "\n"


def _ci(values: Sequence[float]) -> List[float]:
    if len(values) < 2:
        return [float("nan"), float("nan")]
    lo, hi = confidence_interval(values)
    return [lo, hi]


def metrics_from_ranks(results: Sequence[RankingResult], modality: str = "ensemble") -> MetricsReport:
    if not results:
        raise DataError("cannot report metrics for an empty test set")
    ranks = [r.rank for r in results]
    hits = [1.0 if r == 1 else 0.0 for r in ranks]
    n = len(ranks)
    std = float(np.std(hits, ddof=1)) if n > 1 else 0.0
    r1 = recall_at_k(ranks, 1)
    report = MetricsReport(
        n=n,
        modality=modality,
        accuracy=r1,
        std_dev=std,
        recall_at_1=r1,
        recall_at_3=recall_at_k(ranks, 3),
        recall_at_5=recall_at_k(ranks, 5),
        mrr=mrr(ranks),
        ci95={
            "accuracy": _ci(hits),
            "recall_at_1": _ci(hits),
            "recall_at_3": _ci([1.0 if r <= 3 else 0.0 for r in ranks]),
            "recall_at_5": _ci([1.0 if r <= 5 else 0.0 for r in ranks]),
            "mrr": _ci([1.0 / r for r in ranks]),
        },
    )
    labels = sorted({r.stratum for r in results if r.stratum is not None})
    for lab in labels:
        sub = [r.rank for r in results if r.stratum == lab]
        report.strata[lab] = {"n": float(len(sub)), "recall_at_1": recall_at_k(sub, 1), "recall_at_3": recall_at_k(sub, 3), "recall_at_5": recall_at_k(sub, 5), "mrr": mrr(sub)}
    return report


def score_testset(
    params: EncoderParams, vocab: Vocab, testset: Sequence[TripletExample], weights: EnsembleWeights = EnsembleWeights()
) -> List[List[ScoreBreakdown]]:
    """Per query, the six ScoreBreakdowns (positive first)."""
    texts: List[str] = []
    for t in testset:
        texts.extend(t.texts())
    reps = encode_batch(params, [tokenize(x, vocab) for x in texts])
    out = []
    for i in range(len(testset)):
        block = reps[7 * i : 7 * i + 7]
        try:
            out.append(score_candidates(block[0], block[1:], weights))
        except DataError as e:
            raise DataError(f"query {i}: {e}") from None
    return out


def evaluate(
    params: EncoderParams,
    vocab: Vocab,
    testset: Sequence[TripletExample],
    weights: EnsembleWeights = EnsembleWeights(),
    modality: str = "ensemble",
    strata: Optional[Sequence[Optional[str]]] = None,
    dump: Optional[List] = None,
) -> MetricsReport:
    """Encode, rank the positive of every triplet by ``modality``, aggregate.

    If ``dump`` is a list, the raw per-query scores are appended to it.
    """
    if modality not in MODALITIES:
        raise DataError(f"unknown modality {modality!r}")
    if not testset:
        raise DataError("cannot evaluate an empty test set")
    scored = score_testset(params, vocab, testset, weights)
    results = []
    for i, cands in enumerate(scored):
        results.append(RankingResult(rank_from_breakdowns(cands, modality), strata[i] if strata else None))
        if dump is not None:
            dump.append({"query": i, **{m: [c.get(m) for c in cands] for m in MODALITIES}})
    return metrics_from_ranks(results, modality)
