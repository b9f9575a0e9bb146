"""Seeded synthetic corpus: concepts grouped into clusters of pseudo-words.

Each concept has a unique term and a few signature words; each cluster has a
few marker words. A definition of a concept starts with its own term, followed
in random order by its signature words, its cluster markers, the term of one
related concept from the same cluster, and filler words. A query is just the
term. Hard negatives are definitions of cluster neighbours that mention the
query term as their related concept, so the query term occurs in the positive
and in every hard negative alike: bag-of-words overlap ties, and telling them
apart requires learning where a term sits and which signature words go with it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np

from .data import DefinitionRecord, DistillText, KGRecord, Record, TripletExample, to_distill_text
from .errors import DataError
from .rag import CATEGORIES, NoteRecord, RagQuery
from .tokenize import split_words

PREDICATES = (
    "anatomically_part_of", "cellular_type_of", "functions_as", "receives_input_from",
    "projects_to", "regulates", "is_subtype_of", "expressed_in",
)  # fmt: skip

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl", "gr", "sk")
_VOWELS = ("a", "e", "i", "o", "u", "ae", "ou")


@dataclass(frozen=True)
class SyntheticSpec:
    concepts: int = 200
    clusters: int = 20
    vocab_size: int = 40  # filler-word pool
    seed: int = 42
    hard_negative_fraction: float = 0.6
    n_train: int = 500
    n_test: int = 100
    n_distill: int = 500
    n_distill_heldout: int = 100
    signature_words: int = 3
    cluster_words: int = 2
    fillers_per_definition: int = 2
    n_patients: int = 10
    categories_per_patient: int = 5
    concepts_per_category: int = 3
    queries_per_patient: int = 10

    def __post_init__(self) -> None:
        if not 1 <= self.clusters <= self.concepts:
            raise DataError("need 1 <= clusters <= concepts")
        if not 0.0 <= self.hard_negative_fraction <= 1.0:
            raise DataError("hard_negative_fraction must lie in [0, 1]")
        n_hard = self.n_hard
        per_cluster = self.concepts // self.clusters
        if per_cluster < 2:
            raise DataError("every cluster needs at least two concepts")
        if n_hard and per_cluster - 1 < n_hard:
            raise DataError(f"clusters of {per_cluster} concepts cannot supply {n_hard} hard negatives")
        if 5 - n_hard and self.clusters < 2:
            raise DataError("random negatives need at least two clusters")
        if self.categories_per_patient > len(CATEGORIES):
            raise DataError("more categories per patient than clinical categories")
        if self.concepts_per_category > self.clusters:
            raise DataError("concepts_per_category cannot exceed the cluster count")
        if self.categories_per_patient > per_cluster:
            raise DataError("clusters too small to give every category a distinct concept")

    @property
    def n_hard(self) -> int:
        return int(round(5 * self.hard_negative_fraction))


@dataclass
class Concept:
    index: int
    cluster: int
    term: str
    signature: Tuple[str, ...]


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    concepts: List[Concept]
    cluster_words: List[Tuple[str, ...]]
    train: List[TripletExample]
    test: List[TripletExample]
    definitions: List[DefinitionRecord]
    kg: List[KGRecord]
    distill_records: List[Record]
    distill_heldout_records: List[Record]
    notes: List[NoteRecord]
    queries: List[RagQuery]

    @property
    def distill(self) -> List[DistillText]:
        return [to_distill_text(r) for r in self.distill_records]

    @property
    def distill_heldout(self) -> List[DistillText]:
        return [to_distill_text(r) for r in self.distill_heldout_records]

    def all_texts(self) -> List[str]:
        out: List[str] = []
        for t in self.train + self.test:
            out.extend(t.texts())
        out.extend(d.text for d in self.distill + self.distill_heldout)
        out.extend(n.text for n in self.notes)
        out.extend(q.query for q in self.queries)
        return out


class _Words:
    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.used: Set[str] = set()

    def fresh(self) -> str:
        while True:
            n = int(self.rng.integers(2, 4))
            w = "".join(_ONSETS[self.rng.integers(len(_ONSETS))] + _VOWELS[self.rng.integers(len(_VOWELS))] for _ in range(n))
            if w not in self.used:
                self.used.add(w)
                return w


def _pick(rng: np.random.Generator, pool: Sequence, k: int) -> List:
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticCorpus:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    words = _Words(rng)
    fillers = [words.fresh() for _ in range(spec.vocab_size)]
    cluster_words = [tuple(words.fresh() for _ in range(spec.cluster_words)) for _ in range(spec.clusters)]
    concepts = [
        Concept(i, i % spec.clusters, words.fresh(), tuple(words.fresh() for _ in range(spec.signature_words)))
        for i in range(spec.concepts)
    ]
    by_cluster: Dict[int, List[int]] = {c: [] for c in range(spec.clusters)}
    for c in concepts:
        by_cluster[c.cluster].append(c.index)

    def body(ci: int, related: int = -1) -> str:
        c = concepts[ci]
        if related < 0:
            related = int(rng.choice([j for j in by_cluster[c.cluster] if j != ci]))
        parts = [concepts[related].term, *c.signature, *cluster_words[c.cluster], *_pick(rng, fillers, spec.fillers_per_definition)]
        return " ".join(parts[i] for i in rng.permutation(len(parts)))

    def definition(ci: int, related: int = -1) -> str:
        # definitions lead with the term they define
        return concepts[ci].term + " " + body(ci, related)

    def query(ci: int) -> str:
        return concepts[ci].term

    def triplet(ci: int, avoid: Set[Tuple[str, str]]) -> TripletExample:
        c = concepts[ci]
        while True:
            pos = definition(ci)
            if (query(ci), pos) not in avoid:
                break
        same = [j for j in by_cluster[c.cluster] if j != ci]
        other = [j for j in range(spec.concepts) if concepts[j].cluster != c.cluster]
        hard = _pick(rng, same, spec.n_hard)
        rand = _pick(rng, other, 5 - spec.n_hard)
        negs = hard + rand
        order = rng.permutation(5)
        negs = [negs[i] for i in order]
        is_hard = [concepts[j].cluster == c.cluster for j in negs]
        meta = {"concept": ci, "cluster": c.cluster, "negative_concepts": negs, "negative_is_hard": is_hard}
        return TripletExample(query(ci), pos, tuple(definition(j, ci if h else -1) for j, h in zip(negs, is_hard)), meta)

    train_concepts = [int(i) for i in np.concatenate([rng.permutation(spec.concepts) for _ in range(-(-spec.n_train // spec.concepts))])[: spec.n_train]]
    seen: Set[Tuple[str, str]] = set()
    train = []
    for ci in train_concepts:
        t = triplet(ci, set())
        seen.add((t.query, t.positive))
        train.append(t)
    trained = sorted(set(train_concepts))
    test = [triplet(trained[int(rng.integers(len(trained)))], seen) for _ in range(spec.n_test)]

    def def_record() -> DefinitionRecord:
        ci = int(rng.integers(spec.concepts))
        return DefinitionRecord(concepts[ci].term, body(ci))

    def kg_record() -> KGRecord:
        a = int(rng.integers(spec.concepts))
        b = int(rng.choice([j for j in by_cluster[concepts[a].cluster] if j != a])) if rng.random() < 0.5 else int(rng.integers(spec.concepts))
        return KGRecord(concepts[a].term, PREDICATES[int(rng.integers(len(PREDICATES)))], concepts[b].term)

    n_def = (spec.n_distill + 1) // 2
    definitions = [def_record() for _ in range(n_def)]
    kg = [kg_record() for _ in range(spec.n_distill - n_def)]
    pool: List[Record] = [*definitions, *kg]
    distill = [pool[i] for i in rng.permutation(len(pool))]
    # held-out texts are new sentences over words the distillation set covers;
    # a word the student never sees keeps its random embedding
    known = {w for r in distill for w in split_words(to_distill_text(r).text)}
    heldout: List[Record] = []
    tries = 0
    while len(heldout) < spec.n_distill_heldout:
        tries += 1
        if tries > 1000 * max(spec.n_distill_heldout, 1):
            raise DataError("cannot draw held-out distillation texts over the training vocabulary")
        rec = def_record() if len(heldout) % 2 == 0 else kg_record()
        if all(w in known for w in split_words(to_distill_text(rec).text)):
            heldout.append(rec)
            (definitions if isinstance(rec, DefinitionRecord) else kg).append(rec)

    notes: List[NoteRecord] = []
    queries: List[RagQuery] = []
    for p in range(spec.n_patients):
        pid = f"Patient{p}"
        cats = _pick(rng, CATEGORIES, spec.categories_per_patient)
        clusters = _pick(rng, list(range(spec.clusters)), spec.concepts_per_category)
        # every category draws one distinct concept from each chosen cluster, so
        # cluster markers appear in all of a patient's notes and only the
        # concept signatures tell categories apart
        columns = {cl: _pick(rng, by_cluster[cl], len(cats)) for cl in clusters}
        # each definition mentions the concept one category over, so every
        # query term also shows up in a note it does not belong to
        owner: Dict[int, str] = {}
        n_cat = len(cats)
        for k, cat in enumerate(cats):
            members = [(columns[cl][k], columns[cl][(k + 1) % n_cat]) for cl in clusters]
            for ci, _ in members:
                owner[ci] = cat
            notes.append(NoteRecord(pid, cat, "\n\n".join(definition(ci, rel) + "." for ci, rel in members)))
        mentioned = sorted(owner)
        for _ in range(spec.queries_per_patient):
            ci = mentioned[int(rng.integers(len(mentioned)))]
            queries.append(RagQuery(query(ci), pid, (owner[ci],)))

    return SyntheticCorpus(spec, concepts, cluster_words, train, test, definitions, kg, distill, heldout, notes, queries)
