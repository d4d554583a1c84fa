"""MLM corruption plans with whole-span consistency, and AR visibility bounds.

Random draws happen in a fixed order so that a plan is a pure function of
the sequence and the generator state:

1. one permutation of the maskable span indices;
2. for each selected span, in selection order: one uniform draw picking the
   branch, then (random branch only) one fine id per position followed by
   one coarse id.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError
from .tokenizer import TokenizedSequence
from .vocab import CLS, MASK, NUM_SPECIALS, PAD, SEP

IGNORE = -1
MASK_PROB = 0.8
RANDOM_PROB = 0.1
BRANCHES = ("mask", "random", "keep")
SPECIAL_IDS = frozenset((PAD, CLS, SEP, MASK))


@dataclass(frozen=True)
class MaskedExample:
    input_fine: tuple[int, ...]
    input_spans: tuple[tuple[int, int, int], ...]
    labels: tuple[int, ...]
    masked_flags: tuple[bool, ...]
    # (span index, branch name) for every selected span, in selection order
    selected: tuple[tuple[int, str], ...] = field(default=())

    def input_coarse_per_position(self) -> list[int]:
        out = [0] * len(self.input_fine)
        for s, e, c in self.input_spans:
            out[s:e] = [c] * (e - s)
        return out


def _is_special_span(seq: TokenizedSequence, span) -> bool:
    s, e, _ = span
    return e - s == 1 and seq.fine_ids[s] in SPECIAL_IDS


def plan_mlm(seq: TokenizedSequence, rng: np.random.Generator, *, fine_size: int,
             coarse_size: int | None, rate: float = 0.15) -> MaskedExample:
    """Select whole spans until at least ``rate`` of the content positions are flagged.

    Each selected span gets one 80/10/10 draw: all of it becomes [MASK]
    (fine ids and the coarse id), all of it is replaced by random non-special
    ids, or it is left unchanged. Labels are the original fine ids.
    With ``coarse_size=None`` no random coarse id is drawn and the random
    branch keeps the span's coarse id.
    """
    if not 0.0 < rate < 1.0:
        raise UsageError(f"mask rate must be in (0, 1), got {rate}")
    if fine_size <= NUM_SPECIALS or (coarse_size is not None and coarse_size <= NUM_SPECIALS):
        raise UsageError("vocabularies need at least one non-special token for random replacement")
    candidates = [k for k, span in enumerate(seq.spans) if not _is_special_span(seq, span)]
    if not candidates:
        raise DataError("nothing to mask: sequence holds only special tokens")
    content = sum(seq.spans[k][1] - seq.spans[k][0] for k in candidates)
    target = rate * content

    order = rng.permutation(len(candidates))
    chosen = []
    flagged = 0
    for o in order:
        if flagged >= target:
            break
        k = candidates[o]
        chosen.append(k)
        flagged += seq.spans[k][1] - seq.spans[k][0]

    fine = list(seq.fine_ids)
    spans = list(seq.spans)
    labels = [IGNORE] * len(fine)
    flags = [False] * len(fine)
    selected = []
    for k in chosen:
        s, e, c = spans[k]
        for i in range(s, e):
            labels[i] = fine[i]
            flags[i] = True
        u = rng.random()
        if u < MASK_PROB:
            branch = "mask"
            fine[s:e] = [MASK] * (e - s)
            spans[k] = (s, e, MASK)
        elif u < MASK_PROB + RANDOM_PROB:
            branch = "random"
            fine[s:e] = [int(x) for x in rng.integers(NUM_SPECIALS, fine_size, size=e - s)]
            if coarse_size is not None:
                spans[k] = (s, e, int(rng.integers(NUM_SPECIALS, coarse_size)))
        else:
            branch = "keep"
        selected.append((k, branch))
    return MaskedExample(tuple(fine), tuple(spans), tuple(labels), tuple(flags), tuple(selected))


def plan_wwm_single_grained(seq: TokenizedSequence, rng: np.random.Generator, *, fine_size: int,
                            coarse_size: int | None = None, rate: float = 0.15) -> MaskedExample:
    """Whole-word masking plan for a single-grained model.

    Selection and fine-side corruption are exactly ``plan_mlm``. No random
    coarse ids are drawn since a single-grained model never reads them.
    """
    return plan_mlm(seq, rng, fine_size=fine_size, coarse_size=None, rate=rate)


def plan_single_grained(seq: TokenizedSequence, rng: np.random.Generator, *, fine_size: int,
                        coarse_size: int | None = None, rate: float = 0.15) -> MaskedExample:
    """Classic token-level masking: every fine token is its own span, no coarse draws."""
    return plan_mlm(seq.as_singletons(), rng, fine_size=fine_size, coarse_size=None, rate=rate)


def ar_visibility(seq: TokenizedSequence) -> np.ndarray:
    """``bound[i]`` = start of the coarse span containing position ``i``.

    The prediction of token ``i`` may only condition on positions ``< bound[i]``.
    """
    bound = np.empty(len(seq.fine_ids), dtype=np.int64)
    pos = 0
    for s, e, _ in seq.spans:
        if s != pos or e <= s:
            raise UsageError(f"spans do not partition the sequence at position {pos}")
        bound[s:e] = s
        pos = e
    if pos != len(seq.fine_ids):
        raise UsageError("spans do not cover the sequence")
    return bound


def check_bounds(bounds) -> None:
    """Raise UsageError unless ``bounds`` is the span-start array of some partition."""
    b = np.asarray(bounds)
    for i in range(len(b)):
        if i == 0:
            ok = b[0] == 0
        else:
            ok = b[i] == i or b[i] == b[i - 1]
        if not ok:
            raise UsageError(f"visibility bound {int(b[i])} at position {i} is not a span start")


def causal_mask(length: int) -> np.ndarray:
    """``[L, L]`` visibility: row ``q`` sees keys ``p <= q``.

    The state at row ``bound[i] - 1`` therefore sees exactly the positions
    ``p < bound[i]``, and because spans partition the sequence every span
    touching those positions ends at or before ``bound[i]``: no coarse
    embedding from token ``i``'s own span leaks in.
    """
    return np.tril(np.ones((length, length), dtype=bool))


def ar_attention_mask(bounds) -> np.ndarray:
    """Attention visibility consumed together with ``bounds`` by the AR objective."""
    check_bounds(bounds)
    return causal_mask(len(bounds))
