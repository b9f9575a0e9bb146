import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from trimodal.encoder import MultiRepresentation, encode, encode_tensors
from trimodal.errors import DataError
from trimodal.scoring import (
    EnsembleWeights,
    candidate_scores_t,
    colbert_score,
    dense_score,
    ensemble_score,
    score_candidates,
    score_pair,
    sparse_score,
)
from trimodal.tokenize import tokenize


def rep(dense, tokens=(), lex=(), multi=None):
    dense = np.asarray(dense, dtype=float)
    multi = np.zeros((0, len(dense))) if multi is None else np.asarray(multi, dtype=float)
    return MultiRepresentation(dense, np.asarray(lex, dtype=float), multi, tuple(tokens))


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_rep(rng, d=8, n=None, words=("a", "b", "c", "d", "e", "f")):
    n = int(rng.integers(1, 6)) if n is None else n
    toks = tuple(rng.choice(words, size=n))
    return rep(unit(rng, d), toks, rng.uniform(0, 1, n), unit(rng, n, d))


def test_dense_examples():
    r = rep([0.6, 0.8])
    assert dense_score(r, r) == pytest.approx(1.0)
    assert dense_score(rep([1, 0]), rep([0, 1])) == 0.0
    assert dense_score(rep([0.6, 0.8]), rep([1, 0])) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(DataError):
        dense_score(rep([1, 0]), rep([1, 0, 0]))


def test_sparse_examples():
    q = rep([1, 0], ("cortex", "x"), (0.5, 0.9))
    p = rep([1, 0], ("cortex", "y"), (0.4, 0.7))
    assert sparse_score(q, p) == pytest.approx(0.2, abs=1e-15)
    assert sparse_score(rep([1, 0], ("a",), (1.0,)), rep([1, 0], ("b",), (1.0,))) == 0.0
    assert sparse_score(rep([1, 0], ("a",), (0.0,)), rep([1, 0], ("a",), (0.0,))) == 0.0
    # zero-token inputs have the natural empty-sum value
    assert sparse_score(rep([1, 0]), p) == 0.0


def test_sparse_collapses_duplicates_to_max():
    q = rep([1, 0], ("a", "a"), (0.2, 0.5))
    p = rep([1, 0], ("a",), (2.0,))
    assert sparse_score(q, p) == pytest.approx(1.0)


def test_colbert_examples():
    q = rep([1, 0], ("u", "v"), (0, 0), [[1, 0], [0, 1]])
    p = rep([1, 0], ("w",), (0,), [[0.6, 0.8]])
    assert colbert_score(q, p) == pytest.approx(0.7, abs=1e-15)
    assert colbert_score(q, q) == pytest.approx(1.0)
    single = rep([1, 0], ("u",), (0,), [[0.6, 0.8]])
    many = rep([1, 0], ("a", "b"), (0, 0), [[1, 0], [0.6, 0.8]])
    assert colbert_score(single, many) == pytest.approx(1.0)
    with pytest.raises(DataError):
        colbert_score(rep([1, 0]), p)


def test_colbert_is_not_symmetric():
    q = rep([1, 0], ("u",), (0,), [[1, 0]])
    p = rep([1, 0], ("a", "b"), (0, 0), [[1, 0], [0, 1]])
    assert colbert_score(q, p) == pytest.approx(1.0)
    assert colbert_score(p, q) == pytest.approx(0.5)


def test_ensemble_examples():
    assert abs(ensemble_score(0.5, 0.2, 0.4, EnsembleWeights(1.0, 0.3, 1.0)) - 0.96) < 1e-12
    assert ensemble_score(0, 0, 0) == 0.0
    assert ensemble_score(0.3, 5.0, 0.9, EnsembleWeights(1, 0, 0)) == 0.3
    with pytest.raises(DataError):
        EnsembleWeights(float("nan"), 0, 0)


def test_score_candidates_matches_pairwise(rng):
    q = random_rep(rng)
    cands = [random_rep(rng) for _ in range(6)]
    got = score_candidates(q, cands)
    assert got == [score_pair(q, c) for c in cands]
    assert score_candidates(q, cands[:1]) == [score_pair(q, cands[0])]
    perm = [3, 1, 5, 0, 2, 4]
    assert score_candidates(q, [cands[i] for i in perm]) == [got[i] for i in perm]
    with pytest.raises(DataError):
        score_candidates(q, [])


@given(st.integers(0, 2**32 - 1))
def test_breakdown_invariants(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    q, p = random_rep(rng), random_rep(rng)
    w = EnsembleWeights(*rng.uniform(0, 2, 3))
    b = score_pair(q, p, w)
    assert -1 - 1e-12 <= b.s_dense <= 1 + 1e-12
    assert b.s_sparse >= 0
    assert -1 - 1e-12 <= b.s_colbert <= 1 + 1e-12
    assert b.s_ensemble == w.w1 * b.s_dense + w.w2 * b.s_sparse + w.w3 * b.s_colbert
    assert dense_score(q, p) == dense_score(p, q)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_argmax_invariant_under_weight_scaling(seed, c):
    rng = np.random.Generator(np.random.PCG64(seed))
    q = random_rep(rng)
    cands = [random_rep(rng) for _ in range(6)]
    w = EnsembleWeights(*rng.uniform(0.1, 2, 3))
    a = [b.s_ensemble for b in score_candidates(q, cands, w)]
    b = [b.s_ensemble for b in score_candidates(q, cands, w.scaled(c))]
    assert int(np.argmax(a)) == int(np.argmax(b))


def test_batched_scores_match_pairwise(tiny_encoder, corpus, vocab):
    params = tiny_encoder
    ts = corpus.train[:3]
    qs = [tokenize(t.query, vocab) for t in ts]
    cs = [tokenize(x, vocab) for t in ts for x in (t.positive, *t.negatives)]
    with torch.no_grad():
        s = candidate_scores_t(encode_tensors(params, qs), encode_tensors(params, cs), 6, len(vocab), EnsembleWeights())
    for i in range(3):
        qr = encode(params, qs[i])
        for j in range(6):
            b = score_pair(qr, encode(params, cs[6 * i + j]))
            for m in ("dense", "sparse", "colbert", "ensemble"):
                assert float(s[m][i, j]) == pytest.approx(b.get(m), abs=1e-12)
