import pytest
from hypothesis import given, settings, strategies as st

from multigrain.errors import ParseError
from multigrain.tokenizer import tokenize_fine
from multigrain.vocab import (
    CLS, MASK, NUM_SPECIALS, PAD, SEP, SPECIAL_TOKENS, UNK, Vocabulary, build_vocab,
    dumps_vocab, ensure_containment, load_vocab, loads_vocab, save_vocab,
)

ws = lambda s: tokenize_fine(s, "whitespace")  # noqa: E731


def test_special_ids_are_fixed():
    v = Vocabulary()
    assert (PAD, UNK, CLS, SEP, MASK) == (0, 1, 2, 3, 4)
    assert [v.id_of(t) for t in SPECIAL_TOKENS] == [0, 1, 2, 3, 4]
    assert len(v) == NUM_SPECIALS


def test_ids_ordered_by_frequency_then_lexicographic():
    v = build_vocab(["b a b", "c a b", "d"], ws)
    # b:3, a:2, then c and d tie at 1
    assert v.tokens[NUM_SPECIALS:] == ("b", "a", "c", "d")
    assert v.id_of("b") == 5 and v.id_of("d") == 8
    assert v.freq_of("a") == 2


def test_min_freq_and_unknown():
    v = build_vocab(["x x y"], ws, min_freq=2)
    assert "x" in v and "y" not in v
    assert v.id_of("y") == UNK
    assert v.lookup(["x", "zzz"]) == [5, UNK]


def test_special_strings_in_corpus_are_not_added_twice():
    v = build_vocab(["[MASK] a"], str.split)
    assert v.id_of("[MASK]") == MASK
    assert len(v) == NUM_SPECIALS + 1


def test_nfc_normalization_merges_equivalent_forms():
    v = build_vocab(["caf\u00e9", "cafe\u0301"], ws)
    assert v.entries == [("caf\u00e9", 2)]


def test_ensure_containment_appends_with_zero_frequency():
    fine = Vocabulary([("a", 5), ("b", 1)], "fine")
    coarse = Vocabulary([("ab", 4), ("a", 2)], "coarse")
    out = ensure_containment(fine, coarse)
    assert out.entries == [("ab", 4), ("a", 2), ("b", 0)]
    assert all(t in out for t in fine.tokens)
    assert ensure_containment(fine, out) is out


def test_round_trip(tmp_path):
    v = Vocabulary([("hello", 3), ("wörld", 1), ("␟", 0)], "coarse")
    save_vocab(v, tmp_path / "v.txt")
    assert load_vocab(tmp_path / "v.txt", "coarse") == v
    assert (tmp_path / "v.txt").read_text(encoding="utf-8") == "hello\t3\nwörld\t1\n␟\t0\n"


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=5)
                       .filter(lambda t: t not in SPECIAL_TOKENS),
                       st.integers(0, 10**6), max_size=20))
def test_round_trip_property(entries):
    v = Vocabulary(sorted(entries.items()), "fine")
    assert loads_vocab(dumps_vocab(v), "fine") == v


@pytest.mark.parametrize("text,line", [
    ("a\t1\nb\n", 2),
    ("a\t1\nb\tx\n", 2),
    ("a\t1\na\t2\n", 2),
    ("\t3\n", 1),
    ("a\t-1\n", 1),
    ("a\t١\n", 1),  # non-ASCII digit
])
def test_malformed_lines_name_the_line(text, line):
    with pytest.raises(ParseError) as err:
        loads_vocab(text, path="v.txt")
    assert err.value.line == line
    assert f"v.txt:{line}" in str(err.value)


def test_unserializable_token_rejected():
    with pytest.raises(ValueError):
        dumps_vocab(Vocabulary([("a\tb", 1)]))


def test_token_of_range():
    v = Vocabulary([("a", 1)])
    assert v.token_of(5) == "a"
    with pytest.raises(IndexError):
        v.token_of(6)
