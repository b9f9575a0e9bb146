"""Training objectives.

Phase 1: per-modality InfoNCE with label smoothing, their weighted mean, the
cross-entropy of each modality's candidate distribution against the (detached)
ensemble distribution, and the average of the two.

Phase 2: cosine, squared-error and similarity-matrix alignment of student and
teacher embeddings.

Every function takes and returns float64 torch tensors and accepts leading
batch dimensions; candidates sit on the last axis with the positive first.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

import torch

from .errors import DataError

LOG_FLOOR = math.log(1e-12)
N_NEGATIVES = 5


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    label_smoothing: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise DataError("temperature must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise DataError("label_smoothing must lie in [0, 1)")
        for name in ("lambda1", "lambda2", "lambda3", "alpha1", "alpha2", "alpha3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DataError(f"{name} must be finite and >= 0")


@dataclass(frozen=True)
class CandidateScores:
    positive: float
    negatives: tuple
    modality: str = "dense"

    def __post_init__(self) -> None:
        if len(self.negatives) != N_NEGATIVES:
            raise DataError(f"expected exactly {N_NEGATIVES} negatives, got {len(self.negatives)}")
        if not all(math.isfinite(x) for x in (self.positive, *self.negatives)):
            raise DataError("candidate scores must be finite")

    def tensor(self) -> torch.Tensor:
        return torch.tensor([self.positive, *self.negatives], dtype=torch.float64)


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(x, dtype=torch.float64)


def softmax_dist(scores, tau: float) -> torch.Tensor:
    s = _t(scores) / tau
    s = s - s.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(s)
    return e / e.sum(dim=-1, keepdim=True)


def smoothed_targets(n: int, eps: float) -> torch.Tensor:
    t = torch.full((n,), eps / n, dtype=torch.float64)
    t[0] += 1.0 - eps
    return t


def info_nce(scores, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Smoothed cross-entropy of the positive (index 0) among all candidates.

    With ``label_smoothing == 0`` this is ``-log p_pos``.
    """
    if isinstance(scores, CandidateScores):
        scores = scores.tensor()
    s = _t(scores)
    logp = torch.log_softmax(s / cfg.temperature, dim=-1)
    target = smoothed_targets(s.shape[-1], cfg.label_smoothing)
    return -(target * logp).sum(-1)


def primary_loss(l_dense, l_sparse, l_colbert, l_ensemble, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return (cfg.lambda1 * _t(l_dense) + cfg.lambda2 * _t(l_sparse) + cfg.lambda3 * _t(l_colbert) + _t(l_ensemble)) / 4.0


def floored_log(p) -> torch.Tensor:
    return torch.log(torch.clamp(_t(p), min=1e-12))


def _soft_ce(target: torch.Tensor, logp: torch.Tensor) -> torch.Tensor:
    return -(target * torch.clamp(logp, min=LOG_FLOOR)).sum(-1)


def self_distill_loss(ensemble_dist, modality_dists: Sequence, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Weighted mean over modalities of -sum(p_ens * log p_m).

    ``modality_dists`` is (dense, sparse, colbert). The ensemble distribution is
    a constant target. Log-probabilities are floored at log(1e-12).
    """
    target = _t(ensemble_dist).detach()
    dense, sparse, colbert = (floored_log(p) for p in modality_dists)
    return _weighted_distill(target, dense, sparse, colbert, cfg)


def _weighted_distill(target, logp_dense, logp_sparse, logp_colbert, cfg: LossConfig) -> torch.Tensor:
    return (
        cfg.lambda1 * _soft_ce(target, logp_dense)
        + cfg.lambda2 * _soft_ce(target, logp_sparse)
        + cfg.lambda3 * _soft_ce(target, logp_colbert)
    ) / 3.0


def self_distill_from_scores(ens_scores, dense_scores, sparse_scores, colbert_scores, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Same loss computed from raw scores through log-softmax (no exp underflow)."""
    tau = cfg.temperature
    target = softmax_dist(_t(ens_scores).detach(), tau)
    lp = [torch.log_softmax(_t(s) / tau, dim=-1) for s in (dense_scores, sparse_scores, colbert_scores)]
    return _weighted_distill(target, *lp, cfg)


def log_floor_hit(*score_sets, tau: float) -> bool:
    return any(bool((torch.log_softmax(_t(s).detach() / tau, dim=-1) < LOG_FLOOR).any()) for s in score_sets)


def final_loss(l_primary, l_distill) -> torch.Tensor:
    return (_t(l_primary) + _t(l_distill)) / 2.0


def entropy(p) -> torch.Tensor:
    return torch.special.entr(_t(p)).sum(-1)


# --- teacher distillation ----------------------------------------------------------


def cosine_embed_loss(student, teacher) -> torch.Tensor:
    s, t = _t(student), _t(teacher)
    if s.shape != t.shape:
        raise DataError(f"shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
    ns, nt = s.norm(dim=-1), t.norm(dim=-1)
    if bool((ns == 0).any()) or bool((nt == 0).any()):
        raise DataError("cosine loss is undefined for a zero vector")
    return 1.0 - (s * t).sum(-1) / (ns * nt)


def mse_embed_loss(student, teacher) -> torch.Tensor:
    s, t = _t(student), _t(teacher)
    if s.shape != t.shape:
        raise DataError(f"shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
    return ((s - t) ** 2).sum(-1)


def similarity_matrix_loss(e_student, e_teacher) -> torch.Tensor:
    s, t = _t(e_student), _t(e_teacher)
    if s.ndim != 2 or s.shape != t.shape or s.shape[0] < 1:
        raise DataError(f"expected two equal (B, d) matrices, got {tuple(s.shape)} and {tuple(t.shape)}")
    b = s.shape[0]
    diff = s @ s.T - t @ t.T
    return (diff**2).sum() / (b * b)


def distill_total(l_cos, l_mse, l_sim, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return cfg.alpha1 * _t(l_cos) + cfg.alpha2 * _t(l_mse) + cfg.alpha3 * _t(l_sim)


# --- reporting -------------------------------------------------------------------------


@dataclass
class LossReport:
    phase: int
    step: int
    values: Dict[str, float] = field(default_factory=dict)
    log_floor_hit: bool = False
    lr: Optional[float] = None
    grad_norm: Optional[float] = None
    grad_norm_clipped: Optional[float] = None
    checkpoint: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))
