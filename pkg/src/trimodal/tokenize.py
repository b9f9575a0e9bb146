"""Word-level tokenizer and vocabulary.

Text is lowercased and split on whitespace and punctuation; punctuation is
dropped. Ids 0-2 are reserved for the CLS, UNK and PAD symbols.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

CLS_ID = 0
UNK_ID = 1
PAD_ID = 2
RESERVED = ("[CLS]", "[UNK]", "[PAD]")

_WORD = re.compile(r"[^\W_]+")


def split_words(text: str) -> List[str]:
    return _WORD.findall(text.lower())


@dataclass
class Vocab:
    token_to_id: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(RESERVED)}
        for i, tok in enumerate(RESERVED):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"reserved token {tok!r} must have id {i}")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense in [0, |V|)")
        self._id_to_token = [""] * len(ids)
        for tok, i in self.token_to_id.items():
            self._id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self._id_to_token)
            self._id_to_token.append(token)
        return self.token_to_id[token]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Vocabulary over all words in ``texts``, ids in first-seen order."""
        vocab = cls()
        for text in texts:
            for word in split_words(text):
                vocab.add(word)
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self._id_to_token, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({tok: i for i, tok in enumerate(tokens)})


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    tokens: tuple

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    words = split_words(text)
    return TokenSeq(tuple(vocab.id(w) for w in words), tuple(words))


def tokenize_many(texts: Sequence[str], vocab: Vocab) -> List[TokenSeq]:
    return [tokenize(t, vocab) for t in texts]
