"""Fine tokenization and greedy alignment of fine tokens into coarse spans."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ConfigError, ParseError
from .vocab import CLS, SEP, SPECIAL_TOKENS, UNK, Vocabulary

FINE_MODES = ("character", "whitespace")
OBJECTIVES = ("autoencoding", "autoregressive")
DEFAULT_MAX_SPAN = 8

# pre-segmented corpus markers
SPAN_SEP = "␟"  # ␟ between coarse spans
TOKEN_SEP = "␠"  # ␠ between fine tokens inside a span


@dataclass(frozen=True)
class TokenizedSequence:
    """Fine ids plus the coarse spans ``(start, end_exclusive, coarse_id)`` covering them."""

    fine_ids: tuple[int, ...]
    spans: tuple[tuple[int, int, int], ...]
    surface: str = ""
    fine_tokens: tuple[str, ...] = ()
    objective: str = "autoencoding"

    def __len__(self) -> int:
        return len(self.fine_ids)

    @property
    def cls_index(self) -> int:
        return 0 if self.objective == "autoencoding" else len(self.fine_ids) - 1

    def coarse_ids_per_position(self) -> list[int]:
        out = [0] * len(self.fine_ids)
        for start, end, cid in self.spans:
            for i in range(start, end):
                out[i] = cid
        return out

    def span_starts(self) -> list[int]:
        out = [0] * len(self.fine_ids)
        for start, end, _ in self.spans:
            for i in range(start, end):
                out[i] = start
        return out

    def as_singletons(self, coarse: Vocabulary | None = None) -> "TokenizedSequence":
        """Same fine ids with every span split into single-token spans.

        Each singleton takes the coarse id of its own fine token when a coarse
        vocabulary is given, otherwise keeps the enclosing span's id.
        """
        per_pos = self.coarse_ids_per_position()
        spans = []
        for i in range(len(self.fine_ids)):
            cid = per_pos[i]
            if coarse is not None and self.fine_tokens:
                cid = coarse.id_of(self.fine_tokens[i])
            spans.append((i, i + 1, cid))
        return TokenizedSequence(self.fine_ids, tuple(spans), self.surface, self.fine_tokens, self.objective)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize_fine(text: str, mode: str = "character") -> list[str]:
    """Split text into fine-grained tokens.

    ``character`` emits one token per code point and drops whitespace;
    ``whitespace`` splits on Unicode whitespace and peels leading/trailing
    punctuation off each word as separate one-character tokens.
    """
    text = unicodedata.normalize("NFC", text)
    if mode == "character":
        return [ch for ch in text if not ch.isspace()]
    if mode != "whitespace":
        raise ConfigError(f"unknown fine tokenization mode {mode!r}")
    out: list[str] = []
    for word in text.split():
        lo, hi = 0, len(word)
        while lo < hi and _is_punct(word[lo]):
            lo += 1
        while hi > lo and _is_punct(word[hi - 1]):
            hi -= 1
        out.extend(word[:lo])
        if lo < hi:
            out.append(word[lo:hi])
        out.extend(word[hi:])
    return out


def segment_coarse(
    fine_tokens: Sequence[str],
    coarse: Vocabulary,
    fine: Vocabulary | None = None,
    max_span: int = DEFAULT_MAX_SPAN,
) -> list[tuple[int, int, int]]:
    """Greedy forward longest-match of fine tokens against the coarse vocabulary.

    Multi-token matches only use tokens known to ``fine`` (when given). A
    position with no match becomes a singleton span carrying the token's own
    coarse id, or coarse [UNK] if the token is unknown.
    """
    if max_span < 1:
        raise ConfigError("max_span must be >= 1")
    n = len(fine_tokens)
    known = [fine is None or t in fine for t in fine_tokens]
    spans = []
    j = 0
    while j < n:
        if not known[j]:
            spans.append((j, j + 1, UNK))
            j += 1
            continue
        # the longest k with all of tokens[j:k] known
        limit = j + 1
        while limit < min(n, j + max_span) and known[limit]:
            limit += 1
        match = None
        for k in range(limit, j + 1, -1):
            cid = coarse.id_of("".join(fine_tokens[j:k]), None)
            if cid is not None:
                match = (j, k, cid)
                break
        if match is None:
            match = (j, j + 1, coarse.id_of(fine_tokens[j]))
        spans.append(match)
        j = match[1]
    return spans


def _wrap(fine_tokens, fine_ids, spans, objective, max_len, surface):
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    if max_len < 2:
        raise ConfigError(f"max_len={max_len} cannot hold the 2 special tokens")
    budget = max_len - 2
    kept = []
    for span in spans:
        if span[1] > budget:
            break
        kept.append(span)
    cut = kept[-1][1] if kept else 0
    fine_tokens = list(fine_tokens[:cut])
    fine_ids = list(fine_ids[:cut])
    first, last = (CLS, SEP) if objective == "autoencoding" else (SEP, CLS)
    ids = (first, *fine_ids, last)
    toks = (SPECIAL_TOKENS[first], *fine_tokens, SPECIAL_TOKENS[last])
    out_spans = [(0, 1, first)]
    out_spans.extend((s + 1, e + 1, c) for s, e, c in kept)
    out_spans.append((cut + 1, cut + 2, last))
    return TokenizedSequence(tuple(ids), tuple(out_spans), surface, toks, objective)


def encode(
    text: str,
    fine: Vocabulary,
    coarse: Vocabulary,
    mode: str = "character",
    objective: str = "autoencoding",
    max_len: int = 128,
    max_span: int = DEFAULT_MAX_SPAN,
) -> TokenizedSequence:
    """Tokenize, look up ids, segment into coarse spans and add [CLS]/[SEP].

    Auto-encoding layout is ``[CLS] ... [SEP]``; auto-regressive is
    ``[SEP] ... [CLS]``. Content is truncated to ``max_len`` at a span boundary.
    """
    tokens = tokenize_fine(text, mode)
    spans = segment_coarse(tokens, coarse, fine, max_span)
    return _wrap(tokens, fine.lookup(tokens), spans, objective, max_len, text)


def parse_presegmented(line: str, path=None, lineno=None) -> list[list[str]]:
    """Parse ``tok␠tok␟tok`` into ``[[tok, tok], [tok]]``. Empty spans are an error."""
    line = unicodedata.normalize("NFC", line.rstrip("\r\n"))
    if not line.strip():
        return []
    spans = []
    for chunk in line.split(SPAN_SEP):
        toks = [t.strip() for t in chunk.split(TOKEN_SEP)]
        if not all(toks) or any(any(c.isspace() for c in t) for t in toks):
            raise ParseError(f"malformed span {chunk!r}", path, lineno)
        spans.append(toks)
    return spans


def format_presegmented(spans: Iterable[Sequence[str]]) -> str:
    return SPAN_SEP.join(TOKEN_SEP.join(span) for span in spans)


def coarse_tokens_of(line: str) -> list[str]:
    """Coarse token strings of a pre-segmented line (fine surfaces concatenated)."""
    return ["".join(span) for span in parse_presegmented(line)]


def fine_tokens_of(line: str) -> list[str]:
    return [t for span in parse_presegmented(line) for t in span]


def encode_presegmented(
    line: str,
    fine: Vocabulary,
    coarse: Vocabulary,
    objective: str = "autoencoding",
    max_len: int = 128,
) -> TokenizedSequence:
    """Encode with an externally supplied segmentation.

    A segmented word that is missing from the coarse vocabulary (for example
    trimmed by ``min_freq``), or that contains a fine OOV token, falls back to
    singleton spans.
    """
    seg = parse_presegmented(line)
    tokens: list[str] = []
    spans = []
    for span_tokens in seg:
        j = len(tokens)
        tokens.extend(span_tokens)
        cid = coarse.id_of("".join(span_tokens), None)
        if len(span_tokens) > 1 and (cid is None or not all(t in fine for t in span_tokens)):
            for i, t in enumerate(span_tokens):
                spans.append((j + i, j + i + 1, coarse.id_of(t) if t in fine else UNK))
        else:
            t = span_tokens[0]
            if len(span_tokens) == 1 and t not in fine:
                cid = UNK
            spans.append((j, len(tokens), UNK if cid is None else cid))
    surface = " ".join(tokens)
    return _wrap(tokens, fine.lookup(tokens), spans, objective, max_len, surface)


def check_partition(seq: TokenizedSequence, coarse_size: int | None = None) -> None:
    """Raise AssertionError unless the spans exactly partition the sequence."""
    pos = 0
    for start, end, cid in seq.spans:
        assert start == pos and end > start, f"span ({start},{end}) breaks partition at {pos}"
        if coarse_size is not None:
            assert 0 <= cid < coarse_size, f"coarse id {cid} out of range"
        pos = end
    assert pos == len(seq.fine_ids), f"spans cover {pos} of {len(seq.fine_ids)} positions"
