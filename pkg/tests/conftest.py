from pathlib import Path

import numpy as np
import pytest

from multigrain.tokenizer import tokenize_fine
from multigrain.vocab import Vocabulary, build_vocab, ensure_containment

ROOT = Path(__file__).resolve().parents[1]
SYNTH = ROOT / "data" / "synthetic"


@pytest.fixture
def synth():
    """Paths of the committed synthetic corpus, vocabularies and task files."""
    return {
        "corpus": SYNTH / "corpus.txt",
        "seg": SYNTH / "corpus.seg.txt",
        "fine": SYNTH / "fine.vocab",
        "coarse": SYNTH / "coarse.vocab",
        "cls": SYNTH / "cls.tsv",
        "span": SYNTH / "span.tsv",
    }


@pytest.fixture(scope="session")
def abc_vocabs():
    """Character vocab over a-f plus coarse words ab, abc, de."""
    fine = build_vocab(["abcdef"], lambda s: tokenize_fine(s, "character"))
    coarse = ensure_containment(fine, Vocabulary([("ab", 3), ("abc", 2), ("de", 2)], "coarse"))
    return fine, coarse


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
