import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trimodal.data import TripletExample
from trimodal.errors import DataError
from trimodal.evaluation import RankingResult, evaluate, metrics_from_ranks, mrr, rank_positive, recall_at_k
from trimodal.stats import bonferroni, cohens_d, confidence_interval, kfold_split, paired_t_test

from oracles import ref_ci, ref_cohens_d, ref_mrr, ref_paired_t, ref_rank, ref_rank_optimistic, ref_recall

# --- ranking metrics ----------------------------------------------------------------


def test_rank_examples():
    assert rank_positive([0.9, 0.1, 0.2, 0.3, 0.4, 0.5]) == 1
    assert rank_positive([0.5, 0.5, 0.2, 0.3, 0.4, 0.1]) == 2
    assert rank_positive([0.0, 0.1, 0.2, 0.3, 0.4, 0.5]) == 6
    with pytest.raises(DataError):
        rank_positive([1.0, 0.5])


def test_recall_and_mrr_examples():
    assert recall_at_k([1, 3, 5], 3) == pytest.approx(2 / 3)
    assert recall_at_k([1, 1, 1], 4) == 1.0
    assert recall_at_k([6, 2, 4], 6) == 1.0
    assert mrr([1, 2, 4]) == pytest.approx(0.583333, abs=1e-6)
    assert mrr([1, 1]) == 1.0
    assert mrr([6]) == pytest.approx(1 / 6)
    with pytest.raises(DataError):
        mrr([])
    with pytest.raises(ValueError):
        recall_at_k([1], 0)


def test_single_rank_two_report():
    r = metrics_from_ranks([RankingResult(2)])
    assert (r.recall_at_1, r.recall_at_3, r.mrr) == (0.0, 1.0, 0.5)


ranks_st = st.lists(st.integers(1, 6), min_size=1, max_size=50)


@given(ranks_st)
def test_metric_properties(ranks):
    r1, r3, r5 = (recall_at_k(ranks, k) for k in (1, 3, 5))
    assert r1 <= r3 <= r5 <= 1.0
    m = mrr(ranks)
    assert r1 <= m <= 1.0
    report = metrics_from_ranks([RankingResult(r) for r in ranks])
    assert report.accuracy == report.recall_at_1


@given(st.lists(st.integers(0, 3), min_size=6, max_size=6))
def test_pessimistic_rank_is_a_lower_bound(levels):
    scores = [float(x) for x in levels]
    assert rank_positive(scores) == ref_rank(scores)
    assert rank_positive(scores) >= ref_rank_optimistic(scores)


def test_metrics_match_reference_on_random_ranks():
    rng = np.random.Generator(np.random.PCG64(3))
    worst = 0.0
    for _ in range(200):
        scores = rng.integers(0, 4, size=(30, 6)).astype(float)
        ranks = [rank_positive(list(s)) for s in scores]
        assert ranks == [ref_rank(list(s)) for s in scores]
        for k in (1, 3, 5):
            worst = max(worst, abs(recall_at_k(ranks, k) - ref_recall(ranks, k)))
        worst = max(worst, abs(mrr(ranks) - ref_mrr(ranks)))
    assert worst < 1e-9


def test_evaluate_matches_score_dump_reranking(tiny_encoder, corpus, vocab):
    dump = []
    report = evaluate(tiny_encoder, vocab, corpus.test, dump=dump)
    assert report.n == len(corpus.test) == len(dump)
    ranks = [ref_rank(d["ensemble"]) for d in dump]
    assert report.recall_at_1 == pytest.approx(ref_recall(ranks, 1), abs=1e-12)
    assert report.recall_at_5 == pytest.approx(ref_recall(ranks, 5), abs=1e-12)
    assert report.mrr == pytest.approx(ref_mrr(ranks), abs=1e-12)


def test_evaluate_order_invariant(tiny_encoder, corpus, vocab):
    test = corpus.test[:30]
    a = evaluate(tiny_encoder, vocab, test)
    b = evaluate(tiny_encoder, vocab, test[::-1])
    assert (a.recall_at_1, a.recall_at_3, a.recall_at_5) == (b.recall_at_1, b.recall_at_3, b.recall_at_5)
    assert a.mrr == pytest.approx(b.mrr, abs=1e-15)


def test_evaluate_rejects_bad_input(tiny_encoder, corpus, vocab):
    with pytest.raises(DataError):
        evaluate(tiny_encoder, vocab, [])
    with pytest.raises(DataError):
        evaluate(tiny_encoder, vocab, corpus.test[:2], modality="bm25")


def test_report_strata_and_serialization():
    results = [RankingResult(1, "a"), RankingResult(2, "a"), RankingResult(1, "b")]
    r = metrics_from_ranks(results)
    assert r.strata["a"]["recall_at_1"] == 0.5 and r.strata["b"]["mrr"] == 1.0
    assert '"recall_at_1"' in r.to_json()
    assert "Recall@1" in r.table()


def test_evaluate_perfect_triplets(tiny_encoder, vocab, corpus):
    # positives identical to the query cannot rank below a different text under dense scoring
    t = corpus.test[0]
    trip = TripletExample(t.query, t.query, t.negatives)
    r = evaluate(tiny_encoder, vocab, [trip], modality="dense")
    assert r.n == 1 and 1 <= 1 / r.mrr <= 6


# --- statistics -------------------------------------------------------------------------------


def test_paired_t_examples():
    assert paired_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    rng = np.random.Generator(np.random.PCG64(11))
    b = rng.normal(size=20)
    d = np.array([1, 1, 1, -1, 1, 0.5, 2, -0.5, 1, 1, 1, -1, 1, 0.5, 2, -0.5, 1, 1, 0.25, 3])
    t, p = paired_t_test(b + d, b)
    rt, rp = ref_paired_t(list(b + d), list(b))
    assert abs(t - rt) < 1e-9 and abs(p - rp) < 1e-6
    with pytest.raises(DataError):
        paired_t_test([1, 2], [1])


def test_bonferroni():
    assert bonferroni(0.03, 5) == pytest.approx(0.15)
    assert bonferroni(0.5, 5) == 1.0


def test_cohens_d_examples():
    assert cohens_d([1, 2, 0, 1, 1], [0, 1, -1, 0, 0]) == pytest.approx(1 / math.sqrt(0.5))
    assert cohens_d([0, 2], [-1, 1]) == pytest.approx(1 / math.sqrt(2))
    assert cohens_d([1, 2, 3], [1, 2, 3]) == 0.0
    a = [2.1, 3.4, 1.9, 5.0, 4.4, 3.3, 2.8, 3.9, 4.1, 2.2]
    b = [1.8, 2.9, 2.5, 3.1, 3.0, 2.2, 2.7, 3.5, 2.0, 1.9]
    assert abs(cohens_d(a, b) - ref_cohens_d(a, b)) < 1e-9
    with pytest.raises(DataError):
        cohens_d([1, 1], [1, 1])


def test_confidence_interval_examples():
    assert confidence_interval([2.0] * 5) == (2.0, 2.0)
    rng = np.random.Generator(np.random.PCG64(5))
    x = list(rng.normal(3, 2, size=30))
    lo, hi = confidence_interval(x)
    rlo, rhi = ref_ci(x)
    assert abs(lo - rlo) < 1e-6 and abs(hi - rhi) < 1e-6
    m = float(np.mean(x))
    assert m - lo == pytest.approx(hi - m, abs=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=40))
def test_ci_contains_mean(x):
    lo, hi = confidence_interval(x)
    m = float(np.mean(x))
    assert lo <= m + 1e-9 and m - 1e-9 <= hi


def test_kfold_examples():
    folds = kfold_split(["s"] * 10, 5, seed=0)
    assert [len(f) for f in folds] == [2] * 5
    strata = ["a"] * 5 + ["b"] * 5
    for f in kfold_split(strata, 5, seed=1):
        assert sorted(strata[i] for i in f) == ["a", "b"]
    with pytest.raises(DataError):
        kfold_split(["a"] * 3, 5)


@given(st.lists(st.sampled_from("abc"), min_size=5, max_size=60), st.integers(2, 5), st.integers(0, 100))
def test_kfold_is_a_partition(strata, k, seed):
    folds = kfold_split(strata, k, seed)
    flat = sorted(i for f in folds for i in f)
    assert flat == list(range(len(strata)))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert folds == kfold_split(strata, k, seed)
