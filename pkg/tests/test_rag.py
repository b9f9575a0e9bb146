import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trimodal.encoder import dense_embeddings
from trimodal.errors import DataError
from trimodal.rag import (
    CATEGORIES,
    NoteRecord,
    RagParams,
    RagQuery,
    category_iou,
    ingest_notes,
    rag_evaluate,
    rag_query,
    reconstruct,
    split_text,
    split_with_delimiters,
    token_count,
)
from trimodal.tokenize import tokenize

# --- splitter ---------------------------------------------------------------------------


def test_short_text_is_one_chunk():
    text = "one two three four five six seven eight nine ten"
    assert split_text(text) == [text]
    assert split_with_delimiters("", 5) == ([], [])


def test_greedy_merge_example():
    chunks, joins = split_with_delimiters("a b c d e f", 2, (" ",))
    assert chunks == ["a b", "c d", "e f"] and joins == [" ", " "]


def test_paragraph_boundary_is_preferred():
    p1 = "alpha beta gamma. delta epsilon"
    p2 = "zeta eta theta. iota kappa"
    chunks, joins = split_with_delimiters(p1 + "\n\n" + p2, 6)
    assert chunks == [p1, p2] and joins == ["\n\n"]


def test_character_level_fallback():
    chunks, joins = split_with_delimiters("abc-def", 1)
    assert all(token_count(c) <= 1 for c in chunks)
    assert reconstruct(chunks, joins) == "abc-def"


def test_invalid_cap():
    with pytest.raises(ValueError):
        split_text("a b", 0)
    with pytest.raises(DataError):
        reconstruct(["a", "b"], [])


doc_pieces = st.sampled_from(["word", "cortex", "glia", " ", "  ", "\n", "\n\n", ". ", ".", ",", "x", "Neuron", "\t", "é"])


@given(st.lists(doc_pieces, max_size=120).map("".join), st.integers(1, 12))
def test_splitter_invariants(text, cap):
    chunks, joins = split_with_delimiters(text, cap)
    assert all(token_count(c) <= cap for c in chunks)
    assert reconstruct(chunks, joins) == text
    assert sum(token_count(c) for c in chunks) >= token_count(text) - len(joins)


def test_splitter_invariants_on_1000_fuzzed_documents():
    rng = np.random.Generator(np.random.PCG64(2024))
    alphabet = ["word", "cortex", " ", " ", " ", "\n", "\n\n", ". ", "a", "bb", ",", "-"]
    for _ in range(1000):
        text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 200))))
        cap = int(rng.integers(1, 30))
        chunks, joins = split_with_delimiters(text, cap)
        assert all(token_count(c) <= cap for c in chunks)
        assert reconstruct(chunks, joins) == text


# --- IoU ----------------------------------------------------------------------------------


def test_iou_examples():
    assert category_iou({"CurrentMeds"}, {"CurrentMeds", "PastHistory"}) == 0.5
    assert category_iou({"labs"}, {"labs"}) == 1.0
    assert category_iou({"labs"}, {"ros"}) == 0.0
    assert category_iou({"labs"}, set()) == 0.0
    with pytest.raises(DataError):
        category_iou(set(), {"labs"})


cat_sets = st.sets(st.sampled_from(CATEGORIES), min_size=1, max_size=6)


@given(cat_sets, cat_sets)
def test_iou_properties(g, r):
    assert category_iou(g, r) == category_iou(r, g)
    assert 0.0 <= category_iou(g, r) <= 1.0
    assert (category_iou(g, r) == 1.0) == (g == r)


# --- records ---------------------------------------------------------------------------------


def test_record_validation():
    with pytest.raises(DataError):
        NoteRecord("", "labs", "text")
    with pytest.raises(DataError):
        NoteRecord("p", "labs", "")
    with pytest.raises(DataError):
        RagQuery("q", "p", ())
    with pytest.raises(DataError):
        RagQuery("q", "p", ("Radiology",))


# --- store --------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def store(tiny_encoder, vocab, corpus):
    return ingest_notes(corpus.notes, RagParams(max_tokens=16, k=1), tiny_encoder, vocab)


def test_chunk_ids_and_caps(store, corpus):
    for pid, ps in store.patients.items():
        for cid, c in ps.chunks.items():
            assert cid == f"{c.patient_id}_{c.category}_chunk{c.seq}" and c.patient_id == pid
            assert c.n_tokens <= 16
        seqs = {}
        for c in ps.chunks.values():
            seqs.setdefault(c.category, []).append(c.seq)
        assert all(sorted(v) == list(range(len(v))) for v in seqs.values())
    n_chunks = sum(len(p.chunks) for p in store.patients.values())
    assert n_chunks == sum(len(split_text(n.text, 16)) for n in corpus.notes)


def test_single_short_record(tiny_encoder, vocab):
    s = ingest_notes([NoteRecord("P", "labs", "cortex glia")], RagParams(), tiny_encoder, vocab)
    assert list(s.patients["P"].chunks) == ["P_labs_chunk0"]
    with pytest.raises(DataError):
        ingest_notes([NoteRecord("P", "Radiology", "x")], RagParams(), tiny_encoder, vocab)


def test_patient_isolation(store, corpus):
    for q in corpus.queries[:40]:
        got, cats = rag_query(store, q, k=5)
        assert all(c.patient_id == q.patient_id for c in got)
    with pytest.raises(DataError):
        rag_query(store, RagQuery("x", "Nobody", ("labs",)))


def test_k1_gives_a_singleton(store, corpus):
    _, cats = rag_query(store, corpus.queries[0], k=1)
    assert len(cats) == 1


def test_query_equal_to_chunk_ranks_it_first(store):
    ps = store.patients["Patient0"]
    cid, chunk = sorted(ps.chunks.items())[3]
    got, _ = rag_query(store, RagQuery(chunk.text, "Patient0", (chunk.category,)), k=1)
    assert got[0].id == cid


def test_reingest_is_identical(store, tiny_encoder, vocab, corpus):
    again = ingest_notes(corpus.notes, store.params, tiny_encoder, vocab)
    for pid in store.patients:
        a, b = store.patients[pid], again.patients[pid]
        assert a.index.ids == b.index.ids and np.array_equal(a.index.vectors, b.index.vectors)


def test_evaluate_matches_brute_force_pipeline(store, tiny_encoder, vocab, corpus):
    for k in (1, 3):
        report = rag_evaluate(store, corpus.queries, k)
        brute = []
        for q in corpus.queries:
            ps = store.patients[q.patient_id]
            ids = sorted(ps.chunks)
            emb = dense_embeddings(tiny_encoder, [tokenize(ps.chunks[i].text, vocab) for i in ids]).astype(np.float32).astype(np.float64)
            qv = dense_embeddings(tiny_encoder, [tokenize(q.query, vocab)])[0].astype(np.float32).astype(np.float64)
            sims = emb @ qv
            order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:k]
            brute.append(category_iou(q.gold_categories, {ps.chunks[ids[i]].category for i in order}))
        assert report.mean_iou == pytest.approx(float(np.mean(brute)), abs=1e-12)
        assert report.mean_iou == rag_evaluate(store, corpus.queries, k, exact=True).mean_iou


def test_report_mean_is_order_invariant(store, corpus):
    a = rag_evaluate(store, corpus.queries, 2)
    b = rag_evaluate(store, corpus.queries[::-1], 2)
    assert a.mean_iou == pytest.approx(b.mean_iou, abs=1e-15)
    assert '"mean_iou"' in a.to_json() and "mean IoU" in a.table()
    with pytest.raises(DataError):
        rag_evaluate(store, [])


def test_two_category_example_report(tiny_encoder, vocab):
    notes = [NoteRecord("P", "CurrentMeds", "cortex glia"), NoteRecord("P", "PastHistory", "axon neuron")]
    s = ingest_notes(notes, RagParams(k=2), tiny_encoder, vocab)
    r = rag_evaluate(s, [RagQuery("cortex", "P", ("CurrentMeds",))])
    assert r.mean_iou == 0.5


@pytest.mark.parametrize("mode", ["sparse", "colbert", "ensemble"])
def test_rerank_extension(tiny_encoder, vocab, corpus, mode):
    s = ingest_notes(corpus.notes[:10], RagParams(max_tokens=16, k=2, rerank=mode, rerank_pool=6), tiny_encoder, vocab)
    q = next(q for q in corpus.queries if q.patient_id in s.patients)
    got, _ = rag_query(s, q)
    assert len(got) == 2
