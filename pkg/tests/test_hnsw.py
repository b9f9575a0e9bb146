import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trimodal.errors import CheckpointError, DataError
from trimodal.hnsw import IndexedVector, IndexParams, build_index, exact_search, insert, load_index, save_index, search

from oracles import ref_exact_search

D = 16


def unit_rows(n, d=D, seed=0):
    x = np.random.Generator(np.random.PCG64(seed)).standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def items(vecs, prefix="v"):
    return [IndexedVector(f"{prefix}{i:05d}", v) for i, v in enumerate(vecs)]


@pytest.fixture(scope="module")
def built():
    vecs = unit_rows(2000)
    return vecs, build_index(items(vecs), IndexParams(dim=D, seed=3))


def test_empty_and_singleton():
    idx = build_index([], IndexParams(dim=D))
    assert len(idx) == 0 and search(idx, unit_rows(1)[0], 5) == []
    v = unit_rows(1)[0]
    one = build_index([IndexedVector("a", v)], IndexParams(dim=D))
    (hit,) = search(one, v, 3)
    assert hit[0] == "a" and abs(hit[1] - 1.0) < 1e-6
    assert exact_search([IndexedVector("a", v)], v, 1)[0][0] == "a"


def test_params_validation():
    with pytest.raises(DataError):
        IndexParams(M=1)
    with pytest.raises(DataError):
        IndexParams(ef_search=0)


def test_search_errors(built):
    vecs, idx = built
    with pytest.raises(DataError):
        idx.search(vecs[0], 10, ef_search=5)
    with pytest.raises(DataError):
        idx.search(vecs[0][:4], 1)
    with pytest.raises(DataError):
        idx.search(vecs[0], 0)


def test_insert_validation_leaves_index_unchanged():
    vecs = unit_rows(20)
    idx = build_index(items(vecs[:10]), IndexParams(dim=D))
    before = (list(idx.ids), idx.vectors.copy())
    with pytest.raises(DataError):
        insert(idx, IndexedVector("v00003", vecs[12]))
    with pytest.raises(DataError):
        idx.add([IndexedVector("new", vecs[12]), IndexedVector("bad", vecs[13] * 2)])
    with pytest.raises(DataError):
        idx.add([IndexedVector("x", vecs[12]), IndexedVector("x", vecs[13])])
    assert idx.ids == before[0] and np.array_equal(idx.vectors, before[1])


def test_own_vector_ranks_first(built):
    vecs, idx = built
    for i in (0, 17, 999, 1999):
        hit = idx.search(vecs[i], 1)[0]
        assert hit[0] == f"v{i:05d}" and abs(hit[1] - 1) < 1e-6


def test_k_larger_than_index_returns_all():
    vecs = unit_rows(7)
    idx = build_index(items(vecs), IndexParams(dim=D))
    assert sorted(h[0] for h in idx.search(vecs[0], 20, 20)) == sorted(f"v{i:05d}" for i in range(7))


def test_degree_bounds(built):
    _, idx = built
    M = idx.params.M
    for i in range(len(idx)):
        for layer in range(int(idx.levels[i]) + 1):
            nb = idx.neighbors(i, layer)
            assert len(nb) <= (2 * M if layer == 0 else M)
            assert len(set(nb.tolist())) == len(nb) and i not in nb
            assert all(idx.levels[j] >= layer for j in nb)


def test_recall_against_exact(built):
    vecs, idx = built
    queries = unit_rows(200, seed=9)
    hits = 0
    for q in queries:
        truth = {i for i, _ in exact_search(idx, q, 10)}
        hits += len(truth & {i for i, _ in idx.search(q, 10)})
    assert hits / 2000 >= 0.95


def test_interleaved_inserts_match_batch_build():
    vecs = unit_rows(600, seed=4)
    params = IndexParams(dim=D, seed=1)
    batch = build_index(items(vecs), params)
    inc = build_index(items(vecs[:100]), params)
    queries = unit_rows(50, seed=5)
    for i in range(100, 600):
        insert(inc, IndexedVector(f"v{i:05d}", vecs[i]))
        if i % 50 == 0:
            inc.search(queries[i % 50], 5)
    for idx in (batch, inc):
        got = 0
        for q in queries:
            truth = {i for i, _ in exact_search(idx, q, 10)}
            got += len(truth & {i for i, _ in idx.search(q, 10)})
        assert got / 500 >= 0.95


def test_exact_search_matches_naive():
    vecs = unit_rows(100, seed=2)
    its = items(vecs)
    naive_items = [(it.id, np.asarray(it.vector, np.float32).astype(np.float64)) for it in its]
    for q in unit_rows(20, seed=3):
        q32 = q.astype(np.float32).astype(np.float64)
        got = exact_search(its, q, 10)
        ref = ref_exact_search(naive_items, q32, 10)
        assert [g[0] for g in got] == [r[0] for r in ref]
        assert np.allclose([g[1] for g in got], [r[1] for r in ref], atol=1e-12)


def test_exact_search_ties_by_id():
    v = np.eye(D)[0]
    its = [IndexedVector(name, v) for name in ("c", "a", "b")]
    assert [h[0] for h in exact_search(its, v, 2)] == ["a", "b"]


@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_search_results_sorted(seed, k):
    vecs = unit_rows(60, seed=seed % 1000)
    idx = build_index(items(vecs), IndexParams(dim=D, seed=seed))
    q = unit_rows(1, seed=seed)[0]
    hits = idx.search(q, k, max(64, k))
    sims = [s for _, s in hits]
    assert sims == sorted(sims, reverse=True)
    assert all(-1 - 1e-6 <= s <= 1 + 1e-6 for s in sims)
    assert len(hits) == min(k, 60)


def test_persistence_roundtrip(tmp_path, built):
    vecs, idx = built
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_index(idx, a)
    back = load_index(a)
    save_index(back, b)
    assert a.read_bytes() == b.read_bytes()
    for q in unit_rows(30, seed=7):
        assert back.search(q, 10) == idx.search(q, 10)
    # the restored level stream continues exactly where the original left off
    extra = unit_rows(5, seed=8)
    idx2 = load_index(a)
    for j, v in enumerate(extra):
        insert(idx2, IndexedVector(f"x{j}", v))
        insert(back, IndexedVector(f"x{j}", v))
    save_index(idx2, a)
    save_index(back, b)
    assert a.read_bytes() == b.read_bytes()


def test_empty_index_roundtrip(tmp_path):
    idx = build_index([], IndexParams(dim=D))
    save_index(idx, tmp_path / "e.bin")
    back = load_index(tmp_path / "e.bin")
    assert len(back) == 0 and back.search(unit_rows(1)[0], 3) == []


def test_corrupt_files_rejected(tmp_path, built):
    _, idx = built
    p = tmp_path / "i.bin"
    save_index(idx, p)
    raw = p.read_bytes()
    for name, data in (("trunc", raw[: len(raw) // 2]), ("tiny", raw[:10]), ("flip", raw[:100] + bytes([raw[100] ^ 1]) + raw[101:])):
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CheckpointError):
            load_index(tmp_path / name)


def test_build_is_deterministic(tmp_path):
    vecs = unit_rows(300, seed=6)
    save_index(build_index(items(vecs), IndexParams(dim=D, seed=2)), tmp_path / "a")
    save_index(build_index(items(vecs), IndexParams(dim=D, seed=2)), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
