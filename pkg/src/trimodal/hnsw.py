"""HNSW approximate nearest-neighbour index over unit vectors (cosine = dot).

Graph layout: ``links[l, i, :counts[l, i]]`` are the neighbours of node ``i``
on layer ``l``. Layer 0 holds up to ``2 * M`` links per node, upper layers up
to ``M``. Node levels are drawn as ``floor(-ln(1 - U) / ln(M))`` with ``U``
from a PCG64 stream seeded per index, so graphs are reproducible. Neighbour
lists are pruned with the usual diversity heuristic (keep a candidate only if
it is closer to the base node than to every neighbour already kept).

The hot loops are numba-compiled; the Python layer owns ids, growth and I/O.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numba
import numpy as np

from .errors import CheckpointError, DataError

MAGIC = b"TRMHNSW\0"
VERSION = 1
NORM_TOL = 1e-6


@dataclass(frozen=True)
class IndexParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    dim: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise DataError("M must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise DataError("beam widths must be >= 1")
        if self.dim < 1:
            raise DataError("dim must be >= 1")


@dataclass
class IndexedVector:
    id: str
    vector: np.ndarray


# --------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _dist(vecs, i, q):
    s = 0.0
    for t in range(q.shape[0]):
        s += np.float64(vecs[i, t]) * np.float64(q[t])
    return 1.0 - s


@numba.njit(cache=True)
def _search_layer(vecs, links, counts, q, ep_ids, ep_dists, ef, layer, visited, stamp):
    """Beam search on one layer. Returns (dists, ids) ascending by (dist, id)."""
    cand = [(ep_dists[0], ep_ids[0])]
    res = [(-ep_dists[0], -ep_ids[0])]  # max-heap by (dist, id) via negation
    visited[ep_ids[0]] = stamp
    for j in range(1, ep_ids.shape[0]):
        visited[ep_ids[j]] = stamp
        heapq.heappush(cand, (ep_dists[j], ep_ids[j]))
        heapq.heappush(res, (-ep_dists[j], -ep_ids[j]))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        d, c = heapq.heappop(cand)
        if d > -res[0][0]:
            break
        for j in range(counts[layer, c]):
            e = links[layer, c, j]
            if visited[e] == stamp:
                continue
            visited[e] = stamp
            de = _dist(vecs, e, q)
            if len(res) < ef or de < -res[0][0]:
                heapq.heappush(cand, (de, e))
                heapq.heappush(res, (-de, -e))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    out_d = np.empty(n, np.float64)
    out_i = np.empty(n, np.int64)
    for j in range(n - 1, -1, -1):
        nd, ni = heapq.heappop(res)
        out_d[j] = -nd
        out_i[j] = -ni
    return out_d, out_i


@numba.njit(cache=True)
def _select(vecs, cand_d, cand_i, m):
    """Diversity heuristic over candidates sorted ascending by distance."""
    keep = np.empty(m, np.int64)
    n_keep = 0
    for j in range(cand_i.shape[0]):
        if n_keep >= m:
            break
        e = cand_i[j]
        good = True
        for r in range(n_keep):
            if _dist(vecs, e, vecs[keep[r]]) < cand_d[j]:
                good = False
                break
        if good:
            keep[n_keep] = e
            n_keep += 1
    # top up with the closest pruned candidates so lists stay full
    if n_keep < m:
        for j in range(cand_i.shape[0]):
            if n_keep >= m:
                break
            e = cand_i[j]
            dup = False
            for r in range(n_keep):
                if keep[r] == e:
                    dup = True
                    break
            if not dup:
                keep[n_keep] = e
                n_keep += 1
    return keep[:n_keep]


@numba.njit(cache=True)
def _sort_pairs(d, ids):
    order = np.argsort(ids, kind="mergesort")
    d, ids = d[order], ids[order]
    order = np.argsort(d, kind="mergesort")
    return d[order], ids[order]


@numba.njit(cache=True)
def _connect(vecs, links, counts, node, nb, layer, cap):
    c = counts[layer, nb]
    if c < cap:
        links[layer, nb, c] = node
        counts[layer, nb] = c + 1
        return
    cand_i = np.empty(c + 1, np.int64)
    cand_d = np.empty(c + 1, np.float64)
    for j in range(c):
        cand_i[j] = links[layer, nb, j]
    cand_i[c] = node
    q = vecs[nb]
    for j in range(c + 1):
        cand_d[j] = _dist(vecs, cand_i[j], q)
    cand_d, cand_i = _sort_pairs(cand_d, cand_i)
    keep = _select(vecs, cand_d, cand_i, cap)
    for j in range(keep.shape[0]):
        links[layer, nb, j] = keep[j]
    counts[layer, nb] = keep.shape[0]


@numba.njit(cache=True)
def _greedy_to(vecs, links, counts, q, entry, top, bottom, visited, stamp):
    """Descend from ``top`` to ``bottom + 1`` with beam 1; returns node, dist, stamp."""
    ep = np.array([entry], np.int64)
    ed = np.array([_dist(vecs, entry, q)])
    for layer in range(top, bottom, -1):
        stamp += 1
        ed, ep = _search_layer(vecs, links, counts, q, ep[:1], ed[:1], 1, layer, visited, stamp)
    return ep[:1], ed[:1], stamp


@numba.njit(cache=True)
def _insert(vecs, links, counts, levels, node, entry, top, M, ef, visited, stamp):
    q = vecs[node]
    level = levels[node]
    ep, ed, stamp = _greedy_to(vecs, links, counts, q, entry, top, level, visited, stamp)
    for layer in range(min(level, top), -1, -1):
        stamp += 1
        wd, wi = _search_layer(vecs, links, counts, q, ep, ed, ef, layer, visited, stamp)
        cap = 2 * M if layer == 0 else M
        keep = _select(vecs, wd, wi, cap)
        for j in range(keep.shape[0]):
            links[layer, node, j] = keep[j]
        counts[layer, node] = keep.shape[0]
        for j in range(keep.shape[0]):
            _connect(vecs, links, counts, node, keep[j], layer, cap)
        ep, ed = wi, wd
    return stamp


@numba.njit(cache=True)
def _build(vecs, links, counts, levels, start, stop, entry, top, M, ef, visited, stamp):
    for node in range(start, stop):
        if entry < 0:
            entry, top = node, levels[node]
            continue
        stamp = _insert(vecs, links, counts, levels, node, entry, top, M, ef, visited, stamp)
        if levels[node] > top:
            entry, top = node, levels[node]
    return entry, top, stamp


@numba.njit(cache=True)
def _knn(vecs, links, counts, q, entry, top, ef, visited, stamp):
    ep, ed, stamp = _greedy_to(vecs, links, counts, q, entry, top, 0, visited, stamp)
    stamp += 1
    wd, wi = _search_layer(vecs, links, counts, q, ep, ed, ef, 0, visited, stamp)
    return wd, wi, stamp


# --------------------------------------------------------------------------


def _as_unit(v: np.ndarray, dim: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise DataError(f"{what}: dimension mismatch, expected ({dim},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{what}: non-finite vector")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > NORM_TOL:
        raise DataError(f"{what}: vector norm {norm:.8f} is not 1 within {NORM_TOL}")
    return (v / norm).astype(np.float32)


def _draw_level(rng: np.random.Generator, M: int) -> int:
    u = float(rng.random())
    return int(math.floor(-math.log(1.0 - u) / math.log(M)))


class Index:
    """Mutable HNSW graph. Single writer, many readers."""

    def __init__(self, params: IndexParams = IndexParams()) -> None:
        self.params = params
        self.ids: List[str] = []
        self._pos: Dict[str, int] = {}
        self._rng = np.random.Generator(np.random.PCG64(params.seed))
        self._vecs = np.zeros((0, params.dim), np.float32)
        self._levels = np.zeros(0, np.int64)
        self._links = np.zeros((1, 0, 2 * params.M), np.int64)
        self._counts = np.zeros((1, 0), np.int64)
        self._visited = np.zeros(0, np.int64)
        self._stamp = 0
        self.entry = -1
        self.top = -1

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vecs[: len(self)]

    @property
    def levels(self) -> np.ndarray:
        return self._levels[: len(self)]

    def neighbors(self, i: int, layer: int) -> np.ndarray:
        if layer > self._levels[i]:
            return np.zeros(0, np.int64)
        return self._links[layer, i, : self._counts[layer, i]].copy()

    def _reserve(self, n_new: int, max_level: int) -> None:
        n = len(self)
        cap = self._vecs.shape[0]
        need = n + n_new
        if need > cap:
            cap = max(need, 2 * cap, 16)
            grow = cap - self._vecs.shape[0]
            self._vecs = np.concatenate([self._vecs, np.zeros((grow, self.params.dim), np.float32)])
            self._levels = np.concatenate([self._levels, np.zeros(grow, np.int64)])
            self._links = np.concatenate([self._links, np.full((self._links.shape[0], grow, self._links.shape[2]), -1, np.int64)], axis=1)
            self._counts = np.concatenate([self._counts, np.zeros((self._counts.shape[0], grow), np.int64)], axis=1)
            self._visited = np.concatenate([self._visited, np.zeros(grow, np.int64)])
        layers = self._links.shape[0]
        if max_level + 1 > layers:
            extra = max_level + 1 - layers
            self._links = np.concatenate([self._links, np.full((extra, cap, self._links.shape[2]), -1, np.int64)])
            self._counts = np.concatenate([self._counts, np.zeros((extra, cap), np.int64)])

    def add(self, items: Sequence[IndexedVector]) -> None:
        """Insert items in order. On any validation error nothing is inserted."""
        seen = set()
        rows = []
        for it in items:
            if it.id in self._pos or it.id in seen:
                raise DataError(f"duplicate id {it.id!r}")
            seen.add(it.id)
            rows.append(_as_unit(it.vector, self.params.dim, f"id {it.id!r}"))
        if not rows:
            return
        state = self._rng.bit_generator.state
        levels = [_draw_level(self._rng, self.params.M) for _ in rows]
        try:
            self._reserve(len(rows), max(levels))
        except Exception:
            self._rng.bit_generator.state = state
            raise
        start = len(self)
        stop = start + len(rows)
        self._vecs[start:stop] = np.stack(rows)
        self._levels[start:stop] = levels
        for it in items:
            self._pos[it.id] = len(self.ids)
            self.ids.append(it.id)
        self.entry, self.top, self._stamp = (
            int(x)
            for x in _build(
                self._vecs, self._links, self._counts, self._levels, start, stop,
                self.entry, self.top, self.params.M, self.params.ef_construction, self._visited, self._stamp,
            )
        )  # fmt: skip

    def insert(self, item: IndexedVector) -> None:
        self.add([item])

    def search(self, query: np.ndarray, k: int, ef_search: Optional[int] = None) -> List[Tuple[str, float]]:
        """Top-``k`` (id, cosine) pairs, descending; ties broken by id."""
        ef = self.params.ef_search if ef_search is None else ef_search
        if k < 1:
            raise DataError("k must be >= 1")
        if ef < k:
            raise DataError(f"ef_search={ef} must be >= k={k}")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.params.dim,):
            raise DataError(f"query dimension mismatch, expected ({self.params.dim},), got {q.shape}")
        if not len(self):
            return []
        q = q.astype(np.float32)
        d, ids, self._stamp = _knn(self._vecs, self._links, self._counts, q, self.entry, self.top, ef, self._visited, self._stamp)
        hits = [(self.ids[int(i)], float(1.0 - dd)) for dd, i in zip(d, ids)]
        hits.sort(key=lambda h: (-h[1], h[0]))
        return hits[:k]


def build_index(vectors: Sequence[IndexedVector], params: IndexParams = IndexParams()) -> Index:
    index = Index(params)
    index.add(vectors)
    return index


def insert(index: Index, v: IndexedVector) -> None:
    index.insert(v)


def search(index: Index, query: np.ndarray, k: int, ef_search: Optional[int] = None) -> List[Tuple[str, float]]:
    return index.search(query, k, ef_search)


def exact_search(
    vectors: Union[Index, Sequence[IndexedVector]], query: np.ndarray, k: int
) -> List[Tuple[str, float]]:
    """Exhaustive cosine scan; ties ordered by id."""
    if k < 1:
        raise DataError("k must be >= 1")
    if isinstance(vectors, Index):
        ids, mat = vectors.ids, vectors.vectors
    else:
        ids = [v.id for v in vectors]
        mat = np.stack([np.asarray(v.vector, np.float32) for v in vectors]) if vectors else np.zeros((0, len(query)), np.float32)
    q = np.asarray(query, dtype=np.float64)
    if mat.shape[0] and q.shape != (mat.shape[1],):
        raise DataError(f"query dimension mismatch, expected ({mat.shape[1]},), got {q.shape}")
    if not len(ids):
        return []
    sims = mat.astype(np.float64) @ q.astype(np.float32).astype(np.float64)
    if k < len(ids):
        # everything tied with the k-th best competes for the last places
        kth = np.partition(sims, len(ids) - k)[len(ids) - k]
        pool = np.flatnonzero(sims >= kth)
    else:
        pool = np.arange(len(ids))
    order = sorted(pool.tolist(), key=lambda i: (-sims[i], ids[i]))[:k]
    return [(ids[i], float(sims[i])) for i in order]


# --------------------------------------------------------------------------
# persistence: magic, u32 version, u32 header length, JSON header, then
# float32 vectors, int32 levels, int32 link counts and int32 links per layer
# (all little-endian), then a sha256 trailer over everything before it.


def save_index(index: Index, path: Union[str, Path]) -> None:
    n = len(index)
    layers = index.top + 1 if n else 0
    header = {
        "params": asdict(index.params),
        "n": n,
        "layers": layers,
        "entry": index.entry,
        "top": index.top,
        "ids": index.ids,
        "rng_state": index._rng.bit_generator.state,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb]
    parts.append(index.vectors.astype("<f4").tobytes())
    parts.append(index.levels.astype("<i4").tobytes())
    for layer in range(layers):
        parts.append(index._counts[layer, :n].astype("<i4").tobytes())
        parts.append(index._links[layer, :n].astype("<i4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_index(path: Union[str, Path]) -> Index:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an index file or truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported index version {version}")
    off = len(MAGIC) + 8
    h = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    params = IndexParams(**h["params"])
    n, layers, d = h["n"], h["layers"], params.dim
    width = 2 * params.M

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(body):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
        off += size
        return arr

    index = Index(params)
    index._reserve(n, max(layers - 1, 0))
    index._vecs[:n] = take("<f4", n * d).reshape(n, d)
    index._levels[:n] = take("<i4", n)
    for layer in range(layers):
        index._counts[layer, :n] = take("<i4", n)
        index._links[layer, :n] = take("<i4", n * width).reshape(n, width)
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    index.ids = list(h["ids"])
    index._pos = {s: i for i, s in enumerate(index.ids)}
    index.entry, index.top = h["entry"], h["top"]
    index._rng.bit_generator.state = h["rng_state"]
    return index
