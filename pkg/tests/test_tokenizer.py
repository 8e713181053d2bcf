import pytest
from hypothesis import given, settings, strategies as st

from unipact.tokenizer import NO, SPECIALS, YES, Vocab, build_vocab, decode, encode, split_tokens

from test_prompting import GOLDEN


def test_answers_forced_in():
    v = build_vocab(["Yes No"])
    assert encode("Yes", v) == [v.yes_id] and encode("No", v) == [v.no_id]
    assert v.yes_id != v.no_id


def test_specials_first_and_dense():
    v = build_vocab(["a b c"])
    assert tuple(v.itos[:len(SPECIALS)]) == SPECIALS
    assert [v.stoi[t] for t in v.itos] == list(range(len(v)))


def test_frequency_then_lexicographic():
    # a, b and c all occur twice: ties break lexicographically
    v = build_vocab(["b a c c", "a b"])
    assert v.itos[len(SPECIALS) + 2:] == ["a", "b", "c"]
    v2 = build_vocab(["z z z y x"])
    assert v2.itos[len(SPECIALS) + 2:] == ["z", "x", "y"]


def test_max_size():
    with pytest.raises(ValueError):
        build_vocab(["a"], max_size=len(SPECIALS) + 1)
    v = build_vocab(["a a b c"], max_size=len(SPECIALS) + 3)
    assert v.itos[-1] == "a" and len(v) == len(SPECIALS) + 3
    with pytest.raises(ValueError):
        build_vocab([])


def test_encode_decode_basics():
    v = build_vocab([GOLDEN, "Yes No"])
    assert encode("", v) == []
    assert decode([], v) == ""
    assert decode([v.yes_id], v) == "Yes"
    assert encode("zebra", v) == [v.unk_id]
    with pytest.raises(IndexError):
        decode([len(v)], v)


def test_numbers_and_hyphens_whole():
    assert split_tokens("30.0 year-old, 88.0.") == ["30.0", "year-old", ",", "88.0", "."]


def test_reference_prompt_round_trip():
    v = build_vocab([GOLDEN])
    ids = encode(GOLDEN, v)
    assert v.unk_id not in ids
    assert split_tokens(decode(ids, v)) == split_tokens(GOLDEN)


def test_rebuild_is_identical(tmp_path):
    docs = [f"doc {i % 17} value {i * 0.5:.1f} end" for i in range(1000)]
    a, b = build_vocab(docs), build_vocab(docs)
    assert a.to_bytes() == b.to_bytes()
    a.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == a


def test_vocab_validation():
    with pytest.raises(ValueError):
        Vocab(["x"] + list(SPECIALS) + [YES, NO])
    with pytest.raises(ValueError):
        Vocab(list(SPECIALS) + [YES])
    with pytest.raises(ValueError):
        Vocab(list(SPECIALS) + [YES, NO, NO])


ALPHABET = "abcXYZ019.-', ?"


@settings(max_examples=150, deadline=None)
@given(st.text(alphabet=ALPHABET, max_size=40))
def test_encode_decode_encode_is_encode(text):
    v = build_vocab([ALPHABET, text, "Yes No"])
    ids = encode(text, v)
    assert encode(decode(ids, v), v) == ids
