"""Dataset records and their line-delimited JSON files.

One record per line, UTF-8. Field names:

* triplet:    ``{"type": "triplet", "query", "positive", "negatives": [5 strings]}``
* definition: ``{"type": "definition", "term", "definition"}``
* kg:         ``{"type": "kg", "subject", "predicate", "object", "rendered_text"}``

Triplets may carry an optional ``meta`` object (concept / cluster labels from
the synthetic generator).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Union

from .errors import DataError
from .tokenize import split_words

KINDS = ("definition", "kg-statement")


@dataclass(frozen=True)
class TripletExample:
    query: str
    positive: str
    negatives: tuple
    meta: Optional[dict] = field(default=None, compare=False, hash=False)

    def __post_init__(self) -> None:
        if len(self.negatives) != 5:
            raise DataError(f"a triplet needs exactly 5 negatives, got {len(self.negatives)}")
        for t in (self.query, self.positive, *self.negatives):
            if not split_words(t):
                raise DataError(f"triplet text has no tokens: {t!r}")

    def texts(self) -> List[str]:
        return [self.query, self.positive, *self.negatives]


@dataclass(frozen=True)
class DistillText:
    text: str
    kind: str
    complexity: int = -1

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise DataError("distillation text is empty")
        if self.kind not in KINDS:
            raise DataError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.complexity < 0:
            object.__setattr__(self, "complexity", len(split_words(self.text)))


@dataclass(frozen=True)
class DefinitionRecord:
    term: str
    definition: str

    def render(self) -> str:
        return f"{self.term}: {self.definition}"


@dataclass(frozen=True)
class KGRecord:
    subject: str
    predicate: str
    object: str
    rendered_text: str = ""

    def render(self) -> str:
        return self.rendered_text or render_kg(self.subject, self.predicate, self.object)


def render_kg(subject: str, predicate: str, obj: str) -> str:
    """``The {subject} {predicate, underscores as spaces} the {object}.``"""
    if not (subject.strip() and predicate.strip() and obj.strip()):
        raise DataError("knowledge-graph fields must be non-empty")
    relation = " ".join(p for p in predicate.split("_") if p)
    return f"The {subject} {relation} the {obj}."


Record = Union[TripletExample, DefinitionRecord, KGRecord]


def record_to_dict(rec: Record) -> dict:
    if isinstance(rec, TripletExample):
        d = {"type": "triplet", "query": rec.query, "positive": rec.positive, "negatives": list(rec.negatives)}
        if rec.meta is not None:
            d["meta"] = rec.meta
        return d
    if isinstance(rec, DefinitionRecord):
        return {"type": "definition", "term": rec.term, "definition": rec.definition}
    if isinstance(rec, KGRecord):
        return {"type": "kg", "subject": rec.subject, "predicate": rec.predicate, "object": rec.object, "rendered_text": rec.render()}
    raise TypeError(f"not a dataset record: {rec!r}")


def record_from_dict(d: dict) -> Record:
    kind = d.get("type")
    try:
        if kind == "triplet":
            return TripletExample(d["query"], d["positive"], tuple(d["negatives"]), d.get("meta"))
        if kind == "definition":
            return DefinitionRecord(d["term"], d["definition"])
        if kind == "kg":
            return KGRecord(d["subject"], d["predicate"], d["object"], d.get("rendered_text", ""))
    except KeyError as e:
        raise DataError(f"{kind} record is missing field {e}") from None
    raise DataError(f"unknown record type {kind!r}")


def to_distill_text(rec: Record) -> DistillText:
    if isinstance(rec, DefinitionRecord):
        return DistillText(rec.render(), "definition")
    if isinstance(rec, KGRecord):
        return DistillText(rec.render(), "kg-statement")
    raise DataError("only definition and kg records feed distillation")


def write_jsonl(path: Union[str, Path], rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None


def write_records(path: Union[str, Path], records: Sequence[Record]) -> None:
    write_jsonl(path, (record_to_dict(r) for r in records))


def read_records(path: Union[str, Path]) -> List[Record]:
    return [record_from_dict(d) for d in read_jsonl(path)]


def read_triplets(path: Union[str, Path]) -> List[TripletExample]:
    recs = read_records(path)
    bad = [r for r in recs if not isinstance(r, TripletExample)]
    if bad:
        raise DataError(f"{path}: expected only triplet records")
    return recs  # type: ignore[return-value]
