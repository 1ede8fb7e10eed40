"""Token and code vocabularies with fixed leading special ids."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from typing import Iterable, Sequence

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, MASK)
PAD_ID, UNK_ID, CLS_ID, MASK_ID = range(4)


class VocabError(KeyError):
    pass


class Vocab:
    """Bijection between strings and integer ids; ids 0-3 are the specials."""

    def __init__(self, entries: Sequence[str]):
        entries = list(entries)
        for s in SPECIALS:
            if s in entries:
                raise VocabError(f"special token {s} given as a regular entry")
        self.itos = list(SPECIALS) + entries
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise VocabError("duplicate vocabulary entries")

    pad_id, unk_id, cls_id, mask_id = PAD_ID, UNK_ID, CLS_ID, MASK_ID

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, s: str) -> bool:
        return s in self.stoi

    def id(self, s: str, strict: bool = False) -> int:
        i = self.stoi.get(s)
        if i is None:
            if strict:
                raise VocabError(s)
            return UNK_ID
        return i

    def string(self, i: int) -> str:
        if not 0 <= i < len(self.itos):
            raise VocabError(i)
        return self.itos[i]

    @property
    def entries(self) -> list[str]:
        return self.itos[len(SPECIALS):]

    def to_json(self) -> dict:
        return {"entries": self.entries}

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(d["entries"])

    def digest(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.to_json() == other.to_json()


class TokenVocab(Vocab):
    pass


class CodeVocab(Vocab):
    """Codes of two kinds, ``"diag"`` and ``"med"``, sharing one id space."""

    def __init__(self, entries: Sequence[str], kinds: dict[str, str]):
        super().__init__(entries)
        missing = [c for c in entries if c not in kinds]
        if missing:
            raise VocabError(f"codes without a kind: {missing[:5]}")
        bad = {k for k in kinds.values()} - {"diag", "med"}
        if bad:
            raise VocabError(f"unknown code kinds {sorted(bad)}")
        self.kinds = {c: kinds[c] for c in entries}

    def ids_of_kind(self, kind: str) -> list[int]:
        return [self.stoi[c] for c in self.entries if self.kinds[c] == kind]

    def codes_of_kind(self, kind: str) -> list[str]:
        return [c for c in self.entries if self.kinds[c] == kind]

    def to_json(self) -> dict:
        return {"entries": self.entries, "kinds": [self.kinds[c] for c in self.entries]}

    @classmethod
    def from_json(cls, d: dict) -> "CodeVocab":
        return cls(d["entries"], dict(zip(d["entries"], d["kinds"])))


def _ordered(counter: Counter) -> list[str]:
    return [s for s, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))]


def build_token_vocab(token_streams: Iterable[Iterable[str]]) -> TokenVocab:
    counts = Counter()
    for toks in token_streams:
        counts.update(t for t in toks if t not in SPECIALS)
    return TokenVocab(_ordered(counts))


def build_code_vocab(diag_streams: Iterable[Iterable[str]], med_streams: Iterable[Iterable[str]]) -> CodeVocab:
    counts: Counter = Counter()
    kinds: dict[str, str] = {}
    for kind, streams in (("diag", diag_streams), ("med", med_streams)):
        for codes in streams:
            for c in codes:
                if not c:
                    raise VocabError("empty code string")
                if kinds.setdefault(c, kind) != kind:
                    raise VocabError(f"code {c!r} used both as diagnosis and medication")
                counts[c] += 1
    return CodeVocab(_ordered(counts), kinds)
