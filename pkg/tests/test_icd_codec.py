from hypothesis import given
from hypothesis import strategies as st
import pytest

from gradibd.errors import EmptyCode, ParseError, ShortCode
from gradibd.icd_codec import UNK_TOKEN, CodeVocab, build_vocab, encode, truncate_code

codes = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.", min_size=3, max_size=8)


def test_truncate_keeps_chapter():
    assert truncate_code("K50.90") == "K50"
    assert truncate_code("  e11.9 ") == "E11"
    assert truncate_code("I10") == "I10"


def test_truncate_rejects_blank_and_short():
    with pytest.raises(EmptyCode):
        truncate_code("   ")
    with pytest.raises(ShortCode):
        truncate_code("K5")


def test_vocab_ids_follow_lexicographic_order():
    vocab = build_vocab(["K50.1", "A01", "K50.9", "E11.2"])
    assert vocab.codes == ("A01", "E11", "K50")
    assert vocab.n == 4
    assert encode(vocab, "K50.3") == 2
    assert encode(vocab, "Z99") == vocab.unk_id == 3
    assert vocab.decode(vocab.unk_id) == UNK_TOKEN


@given(st.lists(codes, min_size=1, max_size=30))
def test_build_vocab_ignores_order_and_duplicates(corpus):
    assert build_vocab(corpus) == build_vocab(list(reversed(corpus)) + corpus)


@given(st.lists(codes, min_size=1, max_size=30))
def test_every_corpus_code_is_known(corpus):
    vocab = build_vocab(corpus)
    assert all(encode(vocab, c) != vocab.unk_id for c in corpus)


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["K50", "E11", "I10"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert path.read_text(encoding="utf-8") == "E11\nI10\nK50\n"
    assert CodeVocab.load(path) == vocab


def test_vocab_file_must_not_list_unk(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text(f"E11\n{UNK_TOKEN}\n", encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        CodeVocab.load(path)
    assert excinfo.value.line_no == 2


def test_vocab_file_lines_are_normalized_like_codes(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("  e11 \nI10.9\n\nk50\n", encoding="utf-8")
    vocab = CodeVocab.load(path)
    assert vocab.codes == ("E11", "I10", "K50")
    assert vocab.encode("e11.4") == vocab.encode("E11")


@pytest.mark.parametrize("text, line_no", [
    ("E11\nK5\n", 2),
    ("E11\n\ne11.2\n", 3),
])
def test_vocab_file_rejects_short_or_colliding_lines(tmp_path, text, line_no):
    path = tmp_path / "vocab.txt"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        CodeVocab.load(path)
    assert excinfo.value.line_no == line_no
