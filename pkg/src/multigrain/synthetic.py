"""Deterministic synthetic corpus and downstream tasks used by the smoke tests.

The corpus is built from twelve fixed "facts" (subject, verb, object, time);
every line joins two facts with "and". Inside a fact each slot determines
the others, so any masked span can be recovered from the rest of its clause.
Several slots are multi-word phrases, which become coarse tokens.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .tokenizer import coarse_tokens_of, format_presegmented, tokenize_fine
from .vocab import build_vocab, ensure_containment, save_vocab

FACTS = [
    ("the new york times", "reported", "the stock market", "on monday"),
    ("the red panda", "ate", "bamboo shoots", "at noon"),
    ("the teacher", "studied", "machine learning", "every evening"),
    ("the united nations", "approved", "a peace treaty", "last week"),
    ("my sister", "bought", "ice cream", "on friday"),
    ("the old farmer", "planted", "sweet potatoes", "in spring"),
    ("a young pilot", "visited", "san francisco", "in july"),
    ("the high school", "hired", "a math tutor", "this year"),
    ("our neighbor", "installed", "solar panels", "on sunday"),
    ("the chef", "cooked", "hot dogs", "at midnight"),
    ("the bank", "issued", "credit cards", "last month"),
    ("the kid", "spread", "peanut butter", "before breakfast"),
]

# multi-word units that count as one coarse token; "the"/"a"/"on"... stay fine
PHRASES = [
    "new york times", "red panda", "united nations", "stock market", "machine learning",
    "bamboo shoots", "peace treaty", "ice cream", "sweet potatoes", "san francisco",
    "high school", "math tutor", "solar panels", "hot dogs", "credit cards", "peanut butter",
    "every evening", "last week", "last month", "this year", "at noon", "at midnight",
    "before breakfast", "old farmer", "young pilot",
]
_PHRASE_SET = {tuple(p.split()) for p in PHRASES}
_MAX_PHRASE = max(len(p) for p in _PHRASE_SET)

TARGET_PHRASE = "new york times"
FILLER_WORDS = ["the", "a", "and", "was", "on", "in", "teacher", "chef", "bank", "kid", "bought",
                "ate", "visited", "reported", "monday", "friday", "sister", "neighbor", "july"]
DISTRACTOR_WORDS = ["new", "york", "times"]


def segment_words(words: list[str]) -> list[list[str]]:
    """Group words into known phrases (longest first), everything else singleton."""
    out, i = [], 0
    while i < len(words):
        for k in range(min(_MAX_PHRASE, len(words) - i), 1, -1):
            if tuple(words[i:i + k]) in _PHRASE_SET:
                out.append(words[i:i + k])
                i += k
                break
        else:
            out.append([words[i]])
            i += 1
    return out


def fact_words(k: int) -> list[str]:
    return " ".join(FACTS[k]).split()


def corpus_lines(n: int = 1000, seed: int = 0) -> list[list[str]]:
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n):
        a, b = rng.integers(0, len(FACTS), size=2)
        lines.append(fact_words(int(a)) + ["and"] + fact_words(int(b)) + ["."])
    return lines


def _contains(words: list[str], phrase: list[str]) -> bool:
    k = len(phrase)
    return any(words[i:i + k] == phrase for i in range(len(words) - k + 1))


def classification_examples(n: int = 500, seed: int = 1) -> list[tuple[int, str]]:
    """Label 1 iff the text contains the contiguous phrase ``new york times``.

    Most negatives contain the same three words scattered or reordered, so
    the label depends on word order rather than on the bag of words.
    """
    rng = np.random.default_rng(seed)
    target = TARGET_PHRASE.split()
    out = []
    for i in range(n):
        label = i % 2
        while True:
            size = int(rng.integers(4, 9))
            words = [FILLER_WORDS[j] for j in rng.integers(0, len(FILLER_WORDS), size=size)]
            if label:
                at = int(rng.integers(0, len(words) + 1))
                words[at:at] = target
                break
            if rng.random() < 0.8:
                for w in rng.permutation(DISTRACTOR_WORDS):
                    words.insert(int(rng.integers(0, len(words) + 1)), str(w))
            if not _contains(words, target):
                break
        out.append((label, " ".join(words)))
    return out


def span_examples(n: int = 500, seed: int = 2) -> list[tuple[int, int, str]]:
    """Filler text with one multi-word phrase inserted; the gold span is the phrase."""
    rng = np.random.default_rng(seed)
    phrases = [p.split() for p in PHRASES if len(p.split()) > 1]
    fillers = [w for w in FILLER_WORDS if not any(w in p for p in phrases)]
    out = []
    for _ in range(n):
        words = [fillers[j] for j in rng.integers(0, len(fillers), size=int(rng.integers(3, 8)))]
        phrase = phrases[int(rng.integers(0, len(phrases)))]
        at = int(rng.integers(0, len(words) + 1))
        words[at:at] = phrase
        out.append((at, at + len(phrase), " ".join(words)))
    return out


def write_all(out_dir, n_lines: int = 1000, coarse_min_freq: int = 8) -> None:
    """Write the corpus (plain and pre-segmented), both vocabularies and the task files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = corpus_lines(n_lines)
    plain = [" ".join(w) for w in lines]
    seg = [format_presegmented(segment_words(w)) for w in lines]
    (out / "corpus.txt").write_text("".join(s + "\n" for s in plain), encoding="utf-8")
    (out / "corpus.seg.txt").write_text("".join(s + "\n" for s in seg), encoding="utf-8")

    task_text = [t for _, t in classification_examples()] + [t for *_, t in span_examples()]
    fine = build_vocab(plain + task_text, lambda s: tokenize_fine(s, "whitespace"), 1, "fine")
    coarse = build_vocab(seg, coarse_tokens_of, coarse_min_freq, "coarse")
    coarse = ensure_containment(fine, coarse)
    save_vocab(fine, out / "fine.vocab")
    save_vocab(coarse, out / "coarse.vocab")

    (out / "cls.tsv").write_text("".join(f"{y}\t{t}\n" for y, t in classification_examples()),
                                 encoding="utf-8")
    (out / "span.tsv").write_text("".join(f"{s}\t{e}\t{t}\n" for s, e, t in span_examples()),
                                  encoding="utf-8")
