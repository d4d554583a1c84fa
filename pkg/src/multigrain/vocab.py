"""Fine- and coarse-grained vocabularies.

Ids 0-4 are always the special tokens; content tokens follow from id 5 in
the order they were added. The on-disk format is one ``token<TAB>freq`` line
per content token, specials implicit.
"""
from __future__ import annotations

import unicodedata
from collections import Counter
from os import PathLike
from typing import Callable, Iterable, Iterator, Sequence, Union

from .errors import ParseError

PAD, UNK, CLS, SEP, MASK = range(5)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIAL_TOKENS)
GRANULARITIES = ("fine", "coarse")


class Vocabulary:
    """Immutable token <-> id bijection with per-token corpus frequencies."""

    __slots__ = ("_tokens", "_freqs", "_index", "granularity")

    def __init__(self, entries: Iterable[tuple[str, int]] = (), granularity: str = "fine"):
        if granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {granularity!r}")
        tokens = list(SPECIAL_TOKENS)
        freqs = [0] * NUM_SPECIALS
        index = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for token, freq in entries:
            if not isinstance(token, str) or not token:
                raise ValueError(f"invalid token {token!r}")
            if token in index:
                raise ValueError(f"duplicate token {token!r}")
            if freq < 0:
                raise ValueError(f"negative frequency for {token!r}")
            index[token] = len(tokens)
            tokens.append(token)
            freqs.append(int(freq))
        self._tokens = tuple(tokens)
        self._freqs = tuple(freqs)
        self._index = index
        self.granularity = granularity

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token) -> bool:
        return token in self._index

    def __iter__(self) -> Iterator[str]:
        return iter(self._tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (
            self.granularity == other.granularity
            and self._tokens == other._tokens
            and self._freqs == other._freqs
        )

    def __hash__(self):
        return hash((self.granularity, self._tokens, self._freqs))

    def __repr__(self) -> str:
        return f"Vocabulary({self.granularity}, size={len(self)})"

    @property
    def entries(self) -> list[tuple[str, int]]:
        """Content entries (specials excluded) in id order."""
        return list(zip(self._tokens[NUM_SPECIALS:], self._freqs[NUM_SPECIALS:]))

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str, default: int | None = UNK) -> int | None:
        return self._index.get(token, default)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise IndexError(f"id {idx} out of range for vocabulary of size {len(self)}")
        return self._tokens[idx]

    def freq_of(self, token: str) -> int:
        return self._freqs[self._index[token]]

    def lookup(self, tokens: Iterable[str]) -> list[int]:
        get = self._index.get
        return [get(t, UNK) for t in tokens]


def _iter_lines(corpus) -> Iterator[str]:
    if isinstance(corpus, (str, PathLike)):
        with open(corpus, encoding="utf-8") as fh:
            yield from fh
    else:
        yield from corpus


def count_tokens(corpus, tokenize: Callable[[str], Sequence[str]]) -> Counter:
    counts: Counter = Counter()
    for line in _iter_lines(corpus):
        counts.update(tokenize(unicodedata.normalize("NFC", line)))
    return counts


def vocab_from_counts(counts: Counter, min_freq: int = 1, granularity: str = "fine") -> Vocabulary:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    kept = [(t, c) for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary(kept, granularity)


def build_vocab(
    corpus: Union[str, PathLike, Iterable[str]],
    tokenize: Callable[[str], Sequence[str]],
    min_freq: int = 1,
    granularity: str = "fine",
) -> Vocabulary:
    """Count tokens over ``corpus`` and keep those seen at least ``min_freq`` times.

    ``corpus`` is a path or an iterable of lines. Ids after the specials are
    ordered by descending frequency, ties broken lexicographically.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    return vocab_from_counts(count_tokens(corpus, tokenize), min_freq, granularity)


def ensure_containment(fine: Vocabulary, coarse: Vocabulary) -> Vocabulary:
    """Return ``coarse`` extended with every fine token it is missing (frequency 0)."""
    missing = [(t, 0) for t in fine.tokens[NUM_SPECIALS:] if t not in coarse]
    if not missing:
        return coarse
    return Vocabulary(coarse.entries + missing, coarse.granularity)


def dumps_vocab(v: Vocabulary) -> str:
    lines = []
    for token, freq in v.entries:
        if "\t" in token or "\n" in token or "\r" in token:
            raise ValueError(f"token {token!r} cannot be serialized")
        lines.append(f"{token}\t{freq}\n")
    return "".join(lines)


def save_vocab(v: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_vocab(v))


def loads_vocab(text: str, granularity: str = "fine", path=None) -> Vocabulary:
    entries = []
    seen = set(SPECIAL_TOKENS)
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise ParseError("expected 'token<TAB>frequency'", path, lineno)
        token, freq = parts
        if not (freq.isascii() and freq.isdigit()):
            raise ParseError(f"bad frequency {freq!r}", path, lineno)
        if token in seen:
            raise ParseError(f"duplicate token {token!r}", path, lineno)
        seen.add(token)
        entries.append((token, int(freq)))
    return Vocabulary(entries, granularity)


def load_vocab(path, granularity: str = "fine") -> Vocabulary:
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_vocab(fh.read(), granularity, path)
