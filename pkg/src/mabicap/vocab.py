"""Tokenisation and the word/index vocabulary."""

from __future__ import annotations

import re
import string
from collections import Counter
from typing import Iterable, Sequence

from .errors import ConfigError

START, END, UNK = 0, 1, 2
SPECIALS = ("<start>", "<end>", "<unk>")

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    def __init__(self, words: Sequence[str], freqs: dict[str, int] | None = None):
        self.itos: list[str] = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        self.freqs: dict[str, int] = dict(freqs or {})

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def encode_caption(self, caption: str | Sequence[str]) -> list[int]:
        """Sentinel-wrapped indices for a raw string or a token list."""
        toks = tokenize(caption) if isinstance(caption, str) else list(caption)
        return [START, *self.encode(toks), END]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        words = [self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK] for i in ids]
        if strip:
            words = [w for w in words if w not in ("<start>", "<end>")]
        return words

    def to_text(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def to_dict(self) -> dict:
        return {"itos": self.itos[len(SPECIALS):], "freqs": self.freqs}

    @classmethod
    def from_dict(cls, d: dict) -> Vocabulary:
        return cls(d["itos"], d.get("freqs"))


def build_vocab(captions: Iterable[str | Sequence[str]], threshold: int = 5) -> Vocabulary:
    """Keep words seen more than ``threshold`` times, most frequent first then A-Z."""
    counts: Counter[str] = Counter()
    n = 0
    for cap in captions:
        counts.update(tokenize(cap) if isinstance(cap, str) else cap)
        n += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c > threshold and w not in SPECIALS),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(kept, {w: counts[w] for w in kept})
