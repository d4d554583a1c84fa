from multigrain.synthetic import PHRASES, classification_examples, segment_words, span_examples, write_all
from multigrain.tokenizer import tokenize_fine


def test_committed_files_match_generator(synth, tmp_path):
    write_all(tmp_path)
    for name in ("corpus.txt", "corpus.seg.txt", "fine.vocab", "coarse.vocab", "cls.tsv", "span.tsv"):
        assert (tmp_path / name).read_bytes() == (synth["corpus"].parent / name).read_bytes(), name


def test_segment_words_prefers_longest_phrase():
    assert segment_words("the new york times and ice cream".split()) == [
        ["the"], ["new", "york", "times"], ["and"], ["ice", "cream"]]


def test_classification_labels():
    for label, text in classification_examples(200):
        words = text.split()
        has = any(words[i:i + 3] == ["new", "york", "times"] for i in range(len(words)))
        assert has == bool(label)


def test_span_gold_is_the_inserted_phrase():
    for start, end, text in span_examples(100):
        words = tokenize_fine(text, "whitespace")
        assert end - start >= 2
        assert " ".join(words[start:end]) in PHRASES


def test_corpus_shape(synth):
    lines = synth["corpus"].read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1000
    assert all(" and " in line and line.endswith(" .") for line in lines)
