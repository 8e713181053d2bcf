"""Word-level tokenizer with a frequency-ranked vocabulary.

Numbers are kept whole (``"88.0"`` is one token) and hyphenated words stay
joined (``"year-old"``); any other punctuation character is its own token.
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS, ECG_SLOT = "<pad>", "<unk>", "<bos>", "<eos>", "<ecg>"
SPECIALS = (PAD, UNK, BOS, EOS, ECG_SLOT)
YES, NO = "Yes", "No"

_TOKEN_RE = re.compile(r"\d+(?:\.\d+)?|[A-Za-z]+(?:[-'][A-Za-z0-9]+)*|[^\sA-Za-z\d]")


def split_tokens(text: str) -> list:
    return _TOKEN_RE.findall(text)


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocab must start with the special tokens in fixed order")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        for t in (YES, NO):
            if t not in tokens:
                raise ValueError(f"vocab is missing answer token {t!r}")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @property
    def ecg_id(self) -> int:
        return self.stoi[ECG_SLOT]

    @property
    def yes_id(self) -> int:
        return self.stoi[YES]

    @property
    def no_id(self) -> int:
        return self.stoi[NO]

    @property
    def special_ids(self) -> frozenset:
        return frozenset(range(len(SPECIALS)))

    def to_bytes(self) -> bytes:
        return ("\n".join(self.itos) + "\n").encode("utf-8")

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[str], max_size: int = 4096) -> Vocab:
    """Rank tokens by descending count, ties broken lexicographically."""
    n_reserved = len(SPECIALS) + 2
    if max_size < n_reserved:
        raise ValueError(f"max_size={max_size} cannot hold {n_reserved} reserved tokens")
    counts = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(split_tokens(doc))
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for t in SPECIALS + (YES, NO):
        counts.pop(t, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    room = max_size - n_reserved
    return Vocab(list(SPECIALS) + [YES, NO] + [t for t, _ in ranked[:room]])


def encode(text: str, v: Vocab) -> list:
    unk = v.unk_id
    return [v.stoi.get(t, unk) for t in split_tokens(text)]


def decode(ids: Sequence[int], v: Vocab) -> str:
    n = len(v)
    specials = v.special_ids
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"token id {i} out of range for vocab of size {n}")
        if i not in specials:
            out.append(v.itos[i])
    return " ".join(out)
