"""Two-phase training loop.

Phase 1 trains the encoder on (query, positive, 5 negatives) triplets with the
multi-modality contrastive + self-distillation objective. Phase 2 aligns a
student encoder to a frozen teacher's dense embeddings on definition and
knowledge-graph sentences, visited in curriculum order.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import losses as L
from .data import DistillText, TripletExample
from .encoder import (
    EncoderParams,
    GradientSet,
    backward,
    dense_embeddings,
    forward,
    pad_batch,
    save_checkpoint,
)
from .errors import DataError, NumericError
from .losses import LossConfig, LossReport
from .scoring import EnsembleWeights, candidate_scores_t
from .tokenize import TokenSeq, Vocab, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 2e-5
    lr_min: float = 0.0
    cycle_length: int = 100
    cycle_mult: float = 1.0
    clip_threshold: float = 1.0
    warmup_steps: int = 0
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    length_buckets: int = 4
    grad_accum_steps: int = 1
    optimizer: str = "sgd"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    eval_every: int = 0
    patience: int = 5
    max_steps: int = -1
    loss: LossConfig = field(default_factory=LossConfig)
    weights: EnsembleWeights = field(default_factory=EnsembleWeights)

    def __post_init__(self) -> None:
        if not self.lr_max > self.lr_min >= 0:
            raise DataError("need lr_max > lr_min >= 0")
        if self.cycle_length < 1 or self.cycle_mult < 1:
            raise DataError("cycle_length and cycle_mult must be >= 1")
        if not self.clip_threshold > 0:
            raise DataError("clip_threshold must be > 0")
        if self.warmup_steps < 0:
            raise DataError("warmup_steps must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.length_buckets < 1 or self.grad_accum_steps < 1:
            raise DataError("batch_size, length_buckets, grad_accum_steps must be >= 1 and epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainLog:
    records: List[LossReport] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    stopped_early: bool = False
    best_step: Optional[int] = None

    def append(self, rec: LossReport) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("step indices must be strictly increasing")
        self.records.append(rec)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    def values(self, key: str) -> List[float]:
        return [r.values[key] for r in self.records]


# --- schedule, clipping, batching -------------------------------------------------


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts; cycle i lasts cycle_length * cycle_mult**i steps.

    With ``warmup_steps > 0`` the rate is additionally scaled by
    ``(step + 1) / warmup_steps`` until the warmup is over.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    t, length = step, float(cfg.cycle_length)
    while t >= length:
        t -= length
        length *= cfg.cycle_mult
    lr = cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / length))
    if step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


def clip_gradients(g: GradientSet, threshold: float) -> GradientSet:
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    norm = g.global_norm()
    if not math.isfinite(norm):
        bad = [k for k, v in g.grads.items() if not torch.isfinite(v).all()]
        raise NumericError(f"non-finite gradient in {bad}")
    if norm <= threshold:
        return g
    return g.scaled(threshold / norm)


def make_batches(lengths: Sequence[int], batch_size: int, n_buckets: int, seed: int) -> List[List[int]]:
    """Index batches grouped by length.

    Items are ranked by length (ties broken by a seeded permutation), cut into
    ``n_buckets`` contiguous buckets, shuffled within each bucket, laid end to
    end and chunked into ``batch_size`` batches; only the last batch may be
    short. The batch order is then shuffled.
    """
    n = len(lengths)
    if n == 0:
        raise DataError("cannot batch an empty dataset")
    rng = np.random.Generator(np.random.PCG64(seed))
    tiebreak = rng.permutation(n)
    order = sorted(range(n), key=lambda i: (lengths[i], tiebreak[i]))
    n_buckets = min(n_buckets, n)
    bounds = np.linspace(0, n, n_buckets + 1).round().astype(int)
    flat: List[int] = []
    for b in range(n_buckets):
        bucket = order[bounds[b] : bounds[b + 1]]
        flat.extend(bucket[i] for i in rng.permutation(len(bucket)))
    batches = [flat[i : i + batch_size] for i in range(0, n, batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def curriculum_order(texts: Sequence[DistillText]) -> List[DistillText]:
    """Stable ascending sort by complexity; definitions precede kg statements on ties."""
    return sorted(texts, key=lambda t: (t.complexity, t.kind != "definition"))


# --- objectives -------------------------------------------------------------------------


@dataclass
class TripletBatch:
    q_ids: torch.Tensor
    q_mask: torch.Tensor
    c_ids: torch.Tensor
    c_mask: torch.Tensor

    @property
    def size(self) -> int:
        return self.q_ids.shape[0]


def make_triplet_batch(triplets: Sequence[TripletExample], vocab: Vocab, max_len: int) -> TripletBatch:
    qs = [tokenize(t.query, vocab) for t in triplets]
    cs = [tokenize(x, vocab) for t in triplets for x in (t.positive, *t.negatives)]
    q_ids, q_mask = pad_batch(qs, max_len)
    c_ids, c_mask = pad_batch(cs, max_len)
    return TripletBatch(q_ids, q_mask, c_ids, c_mask)


def phase1_terms(
    tensors: Dict[str, torch.Tensor],
    params: EncoderParams,
    batch: TripletBatch,
    loss_cfg: LossConfig,
    weights: EnsembleWeights,
    target: Optional[torch.Tensor] = None,
) -> Dict[str, torch.Tensor]:
    """Per-example loss terms, each of shape (B,), plus the raw (B, 6) scores.

    The self-distillation target is the detached ensemble distribution. Passing
    ``target`` pins it to a fixed (B, 6) distribution instead, which is what a
    finite-difference check needs: the stop-gradient makes the training
    gradient that of the loss with the target held constant.
    """
    cfg = params.config
    q = forward(tensors, cfg, batch.q_ids, batch.q_mask)
    c = forward(tensors, cfg, batch.c_ids, batch.c_mask)
    scores = candidate_scores_t(q, c, 6, cfg.vocab_size, weights)
    terms = {f"infonce_{m}": L.info_nce(s, loss_cfg) for m, s in scores.items()}
    terms["primary"] = L.primary_loss(terms["infonce_dense"], terms["infonce_sparse"], terms["infonce_colbert"], terms["infonce_ensemble"], loss_cfg)
    tau = loss_cfg.temperature
    if target is None:
        target = L.softmax_dist(scores["ensemble"].detach(), tau)
    for m in ("dense", "sparse", "colbert"):
        terms[f"ce_{m}"] = -(target * torch.clamp(torch.log_softmax(scores[m] / tau, dim=-1), min=L.LOG_FLOOR)).sum(-1)
    terms["distill"] = (loss_cfg.lambda1 * terms["ce_dense"] + loss_cfg.lambda2 * terms["ce_sparse"] + loss_cfg.lambda3 * terms["ce_colbert"]) / 3.0
    terms["final"] = L.final_loss(terms["primary"], terms["distill"])
    terms["target_entropy"] = L.entropy(target)
    terms["target"] = target
    for m, s in scores.items():
        terms[f"scores_{m}"] = s
    return terms


def phase1_objective(
    params: EncoderParams,
    loss_cfg: LossConfig,
    weights: EnsembleWeights,
    reduction: str = "mean",
    with_terms: bool = False,
    target: Optional[torch.Tensor] = None,
):
    """Batch L_final; ``reduction="sum"`` makes duplicated examples count twice."""

    def objective(tensors: Dict[str, torch.Tensor], batch: TripletBatch):
        terms = phase1_terms(tensors, params, batch, loss_cfg, weights, target)
        final = terms["final"].sum() if reduction == "sum" else terms["final"].mean()
        return (final, terms) if with_terms else final

    return objective


@dataclass
class DistillBatch:
    ids: torch.Tensor
    mask: torch.Tensor
    teacher: torch.Tensor  # (B, d)


def phase2_terms(tensors: Dict[str, torch.Tensor], params: EncoderParams, batch: DistillBatch, loss_cfg: LossConfig) -> Dict[str, torch.Tensor]:
    e_s = forward(tensors, params.config, batch.ids, batch.mask).dense
    e_t = batch.teacher
    l_cos = L.cosine_embed_loss(e_s, e_t).mean()
    l_mse = L.mse_embed_loss(e_s, e_t).mean()
    l_sim = L.similarity_matrix_loss(e_s, e_t)
    return {"cosine": l_cos, "mse": l_mse, "sim": l_sim, "distill_total": L.distill_total(l_cos, l_mse, l_sim, loss_cfg)}


def phase2_objective(params: EncoderParams, loss_cfg: LossConfig, with_terms: bool = False):
    def objective(tensors: Dict[str, torch.Tensor], batch: DistillBatch):
        terms = phase2_terms(tensors, params, batch, loss_cfg)
        return (terms["distill_total"], terms) if with_terms else terms["distill_total"]

    return objective


# --- optimizer ----------------------------------------------------------------------------


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: EncoderParams) -> None:
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = OrderedDict((k, torch.zeros_like(v)) for k, v in params.tensors.items())
            self.v = OrderedDict((k, torch.zeros_like(v)) for k, v in params.tensors.items())

    def step(self, params: EncoderParams, g: GradientSet, lr: float) -> None:
        self.t += 1
        if self.cfg.optimizer == "sgd":
            for k, t in params.tensors.items():
                t.sub_(lr * g.grads[k])
            return
        b1, b2 = self.cfg.adam_betas
        for k, t in params.tensors.items():
            gk = g.grads[k]
            self.m[k].mul_(b1).add_((1 - b1) * gk)
            self.v[k].mul_(b2).add_((1 - b2) * gk * gk)
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            t.sub_(lr * mhat / (torch.sqrt(vhat) + self.cfg.adam_eps))


def _accumulate(params: EncoderParams, parts: Sequence, objective) -> Tuple[GradientSet, Dict[str, torch.Tensor]]:
    """Sum sub-batch gradients into one update (averaged over sub-batches).

    Returns the gradient and the per-part auxiliary terms concatenated
    (per-example terms) or averaged (batch-level scalars)."""
    total: Optional[GradientSet] = None
    auxes = []
    for part in parts:
        g = backward(params, part, objective)
        auxes.append(g.aux or {})
        total = g if total is None else total + g
    assert total is not None
    if len(parts) > 1:
        total = total.scaled(1.0 / len(parts))
    terms = {}
    for k in auxes[0]:
        vals = [a[k] for a in auxes]
        terms[k] = torch.cat(vals) if vals[0].ndim else torch.stack(vals).mean()
    return total, terms


def _split(indices: List[int], k: int) -> List[List[int]]:
    k = min(k, len(indices))
    bounds = np.linspace(0, len(indices), k + 1).round().astype(int)
    return [indices[bounds[i] : bounds[i + 1]] for i in range(k)]


# --- phase 1 ---------------------------------------------------------------------------------


def _phase1_eval(params: EncoderParams, batch: TripletBatch, cfg: TrainConfig) -> Tuple[float, float]:
    with torch.no_grad():
        terms = phase1_terms(params.tensors, params, batch, cfg.loss, cfg.weights)
    s = terms["scores_ensemble"]
    rank = 1 + (s[:, 1:] >= s[:, :1]).sum(1)
    return float(terms["final"].mean()), float((rank == 1).double().mean())


def train_phase1(
    params: EncoderParams,
    triplets: Sequence[TripletExample],
    vocab: Vocab,
    cfg: TrainConfig,
    validation: Optional[Sequence[TripletExample]] = None,
    checkpoint_dir: Optional[Path] = None,
    on_epoch_end: Optional[Callable[[int, EncoderParams], None]] = None,
) -> Tuple[EncoderParams, TrainLog]:
    if not triplets:
        raise DataError("phase 1 needs at least one triplet")
    params = params.clone()
    trainlog = TrainLog()
    max_len = params.config.max_len
    lengths = [sum(len(tokenize(x, vocab)) for x in t.texts()) for t in triplets]
    objective = phase1_objective(params, cfg.loss, cfg.weights, with_terms=True)
    opt = _Optimizer(cfg, params)
    val_batch = make_triplet_batch(validation, vocab, max_len) if validation else None
    best: Optional[Tuple[float, int, EncoderParams]] = None
    best_val_loss, stale = math.inf, 0
    step = 0

    for epoch in range(cfg.epochs):
        for idx in make_batches(lengths, cfg.batch_size, cfg.length_buckets, cfg.seed + epoch):
            if 0 <= cfg.max_steps <= step:
                break
            parts = [make_triplet_batch([triplets[i] for i in sub], vocab, max_len) for sub in _split(idx, cfg.grad_accum_steps)]
            try:
                g, terms = _accumulate(params, parts, objective)
            except NumericError as e:
                raise NumericError(f"step {step}: {e}") from None
            pre = g.global_norm()
            g = clip_gradients(g, cfg.clip_threshold)
            lr = lr_schedule(step, cfg)
            opt.step(params, g, lr)
            rec = LossReport(
                phase=1,
                step=step,
                values={k: float(v.mean()) for k, v in terms.items() if not k.startswith("scores_") and k != "target"},
                log_floor_hit=L.log_floor_hit(*(terms[f"scores_{m}"] for m in ("dense", "sparse", "colbert")), tau=cfg.loss.temperature),
                lr=lr,
                grad_norm=pre,
                grad_norm_clipped=g.global_norm(),
            )
            step += 1
            if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                path = Path(checkpoint_dir) / f"phase1_step{step}.ckpt"
                save_checkpoint(path, params, vocab)
                rec.checkpoint = str(path.name)
                trainlog.checkpoints.append(str(path))
            if val_batch is not None and cfg.eval_every and step % cfg.eval_every == 0:
                vloss, vr1 = _phase1_eval(params, val_batch, cfg)
                rec.values["val_final"], rec.values["val_recall1"] = vloss, vr1
                if best is None or vr1 > best[0]:
                    best = (vr1, step, params.clone())
                if vloss < best_val_loss:
                    best_val_loss, stale = vloss, 0
                else:
                    stale += 1
            trainlog.append(rec)
            if val_batch is not None and stale >= cfg.patience:
                trainlog.stopped_early = True
                break
        if on_epoch_end is not None:
            on_epoch_end(epoch, params)
        if trainlog.stopped_early or 0 <= cfg.max_steps <= step:
            break
    if best is not None:
        trainlog.best_step = best[1]
        return best[2], trainlog
    return params, trainlog


# --- phase 2 ---------------------------------------------------------------------------------


def train_phase2(
    student: EncoderParams,
    teacher: Optional[EncoderParams],
    texts: Sequence[DistillText],
    vocab: Vocab,
    cfg: TrainConfig,
    teacher_embeddings: Optional[np.ndarray] = None,
    checkpoint_dir: Optional[Path] = None,
) -> Tuple[EncoderParams, TrainLog]:
    """Align ``student`` to a frozen teacher. Teacher outputs come either from
    ``teacher`` params or from ``teacher_embeddings`` aligned with ``texts``."""
    if not texts:
        raise DataError("phase 2 needs at least one text")
    ordered_idx = sorted(range(len(texts)), key=lambda i: (texts[i].complexity, texts[i].kind != "definition"))
    seqs: List[TokenSeq] = [tokenize(texts[i].text, vocab) for i in ordered_idx]
    if teacher_embeddings is not None:
        t_emb = np.asarray(teacher_embeddings, dtype=np.float64)
        if t_emb.ndim != 2 or t_emb.shape[0] != len(texts):
            raise DataError(f"teacher embeddings have shape {t_emb.shape}, expected {(len(texts), student.config.dim)}")
        t_emb = t_emb[ordered_idx]
        t_emb = t_emb / np.linalg.norm(t_emb, axis=1, keepdims=True)
    elif teacher is not None:
        t_emb = dense_embeddings(teacher, seqs)
    else:
        raise DataError("phase 2 needs a teacher encoder or teacher embeddings")
    if t_emb.shape != (len(seqs), student.config.dim):
        raise DataError(f"teacher embeddings have shape {t_emb.shape}, expected {(len(seqs), student.config.dim)}")
    teacher_t = torch.from_numpy(np.ascontiguousarray(t_emb))

    params = student.clone()
    trainlog = TrainLog()
    objective = phase2_objective(params, cfg.loss, with_terms=True)
    opt = _Optimizer(cfg, params)
    max_len = params.config.max_len
    step = 0
    for _ in range(cfg.epochs):
        for start in range(0, len(seqs), cfg.batch_size):
            if 0 <= cfg.max_steps <= step:
                break
            idx = list(range(start, min(start + cfg.batch_size, len(seqs))))
            parts = []
            for sub in _split(idx, cfg.grad_accum_steps):
                ids, mask = pad_batch([seqs[i] for i in sub], max_len)
                parts.append(DistillBatch(ids, mask, teacher_t[sub]))
            try:
                g, terms = _accumulate(params, parts, objective)
            except NumericError as e:
                raise NumericError(f"step {step}: {e}") from None
            pre = g.global_norm()
            g = clip_gradients(g, cfg.clip_threshold)
            lr = lr_schedule(step, cfg)
            opt.step(params, g, lr)
            rec = LossReport(phase=2, step=step, values={k: float(v) for k, v in terms.items()}, lr=lr, grad_norm=pre, grad_norm_clipped=g.global_norm())
            step += 1
            if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                path = Path(checkpoint_dir) / f"phase2_step{step}.ckpt"
                save_checkpoint(path, params, vocab)
                rec.checkpoint = str(path.name)
                trainlog.checkpoints.append(str(path))
            trainlog.append(rec)
    return params, trainlog


def distill_eval(student: EncoderParams, teacher_emb: np.ndarray, texts: Sequence[str], vocab: Vocab) -> float:
    """Mean student-teacher cosine similarity of dense embeddings."""
    s = dense_embeddings(student, [tokenize(t, vocab) for t in texts])
    t = np.asarray(teacher_emb, dtype=np.float64)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    return float(np.mean(np.sum(s * t, axis=1)))


def distill_objective(student: EncoderParams, teacher_emb: np.ndarray, texts: Sequence[str], vocab: Vocab, loss_cfg: LossConfig) -> Dict[str, float]:
    """Phase-2 loss terms evaluated on all of ``texts`` as one batch."""
    t = np.asarray(teacher_emb, dtype=np.float64)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    ids, mask = pad_batch([tokenize(x, vocab) for x in texts], student.config.max_len)
    with torch.no_grad():
        terms = phase2_terms(student.tensors, student, DistillBatch(ids, mask, torch.from_numpy(t)), loss_cfg)
    return {k: float(v) for k, v in terms.items()}
