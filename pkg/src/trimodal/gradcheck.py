"""Finite-difference check of the phase-1 and phase-2 objectives on a tiny encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import torch

from .encoder import EncoderConfig, EncoderParams, backward, finite_difference, init_encoder, pad_batch
from .losses import LossConfig
from .scoring import EnsembleWeights
from .synthetic import SyntheticSpec, gen_synthetic
from .tokenize import Vocab, tokenize
from .trainer import DistillBatch, make_triplet_batch, phase1_objective, phase1_terms, phase2_objective

# a tensor whose autograd gradient is below this norm is treated as exactly
# zero (e.g. the attention key bias, which cancels inside the softmax); its
# relative error is undefined, so it is checked against ZERO_NUMERIC instead
ZERO_ANALYTIC = 1e-12
ZERO_NUMERIC = 1e-8


@dataclass
class GradCheckResult:
    h: float
    relative: Dict[str, Dict[str, float]] = field(default_factory=dict)  # phase -> tensor -> rel. error
    zero: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)  # phase -> tensor -> (|a|, |n|)

    @property
    def max_error(self) -> float:
        return max(v for errs in self.relative.values() for v in errs.values())

    @property
    def zeros_ok(self) -> bool:
        return all(n < ZERO_NUMERIC for z in self.zero.values() for _, n in z.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol and self.zeros_ok

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "max_relative_error": self.max_error,
            "relative": self.relative,
            "zero_gradient": {p: {k: list(v) for k, v in z.items()} for p, z in self.zero.items()},
        }


def _compare(params: EncoderParams, batch, objective, h: float) -> Tuple[Dict[str, float], Dict[str, Tuple[float, float]]]:
    analytic = backward(params, batch, objective).grads
    numeric = finite_difference(params, batch, objective, h)
    rel, zero = {}, {}
    for name, a in analytic.items():
        n = numeric[name]
        an, nn = float(a.norm()), float(n.norm())
        if an < ZERO_ANALYTIC:
            zero[name] = (an, nn)
        else:
            rel[name] = float((a - n).norm()) / max(an, nn)
    return rel, zero


def grad_check(seed: int = 0, dim: int = 8, layers: int = 1, n_triplets: int = 4, n_texts: int = 4, h: float = 1e-5) -> GradCheckResult:
    """Autograd vs central differences for L_final and the phase-2 total.

    Per tensor the error is ``||a - n|| / max(||a||, ||n||)``. The vocabulary
    is restricted to the sampled texts to keep the number of coordinates (and
    so the number of forward passes) small.
    """
    corpus = gen_synthetic(SyntheticSpec())
    triplets = corpus.train[:n_triplets]
    texts = [d.text for d in corpus.distill[:n_texts]]
    vocab = Vocab.build([x for t in triplets for x in t.texts()] + texts)
    cfg = EncoderConfig(vocab_size=len(vocab), dim=dim, layers=layers, heads=2, max_len=32, seed=seed)
    params = init_encoder(cfg)
    result = GradCheckResult(h)

    batch1 = make_triplet_batch(triplets, vocab, cfg.max_len)
    with torch.no_grad():
        target = phase1_terms(params.tensors, params, batch1, LossConfig(), EnsembleWeights())["target"]
    # the self-distillation target is a stop-gradient constant, so the
    # numerical derivative must hold it at its base-point value too
    obj1 = phase1_objective(params, LossConfig(), EnsembleWeights(), target=target)
    result.relative["phase1"], result.zero["phase1"] = _compare(params, batch1, obj1, h)

    rng = np.random.Generator(np.random.PCG64(seed + 1))
    teacher = rng.standard_normal((len(texts), dim))
    teacher /= np.linalg.norm(teacher, axis=1, keepdims=True)
    ids, mask = pad_batch([tokenize(t, vocab) for t in texts], cfg.max_len)
    batch2 = DistillBatch(ids, mask, torch.from_numpy(teacher))
    obj2 = phase2_objective(params, LossConfig())
    result.relative["phase2"], result.zero["phase2"] = _compare(params, batch2, obj2, h)
    return result
