import pytest
from hypothesis import given
from hypothesis import strategies as st

from pixelrep.subword import (
    BOS,
    EOS,
    MARKER,
    PAD,
    UNK,
    SegmenterModel,
    Tokenizer,
    Vocabulary,
    build_joint,
    build_union,
    expand_vocabulary,
    train_segmenter,
)


def vocab_tokenizer(tokens):
    return Tokenizer(SegmenterModel([], sorted({c for t in tokens for c in t})), Vocabulary(tokens))


def test_specials_are_fixed():
    v = Vocabulary(["x", "y"])
    assert v.token_of[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert v.specials == {"PAD": 0, "BOS": 1, "EOS": 2, "UNK": 3}
    assert v.id_of["y"] == 5 and v.size == 6
    assert v.add("x") == 4


def test_merge_trace():
    # words carry a boundary marker: "▁aaab", "▁aab"
    # pair counts: (a,a)=3, (a,b)=2, (▁,a)=2 -> merge (a,a)
    # then (▁,aa)=2, (aa,a)=1, (a,b)=1, (aa,b)=1 -> merge (▁,aa)
    tok = train_segmenter(["aaab", "aab"], 9)
    assert tok.segmenter.merges == [("a", "a"), (MARKER, "aa")]
    assert train_segmenter(["aaab", "aab"], 8).segmenter.merges == [("a", "a")]


def test_stops_when_no_pair_repeats():
    tok = train_segmenter(["abc"], 100)
    assert tok.segmenter.merges == []


def test_lexicographic_tie_break():
    # every pair occurs twice; the smallest pair wins
    tok = train_segmenter(["ab cd", "ab cd"], 10)
    assert tok.segmenter.merges[0] == min(
        [(MARKER, "a"), ("a", "b"), (MARKER, "c"), ("c", "d")]
    )


def test_target_too_small():
    with pytest.raises(ValueError, match="alphabet"):
        train_segmenter(["abc"], 7)
    with pytest.raises(ValueError, match="empty"):
        train_segmenter([], 100)


def test_encode_decode():
    tok = train_segmenter(["low lower lowest", "low low lower"], 30)
    assert tok.encode("") == []
    assert tok.decode(tok.encode("low lower")) == "low lower"
    assert UNK not in tok.encode("low lower")


def test_unseen_script_is_all_unk():
    tok = train_segmenter(["hello world", "hello there"], 20)
    ids = tok.encode("шалом мир")
    assert ids and all(i == UNK for i in ids)


@given(st.lists(st.sampled_from(["low", "lower", "new", "newer", "wide", "lo", "er"]), min_size=1, max_size=8))
def test_round_trip_on_unk_free_text(words):
    tok = train_segmenter(["low lower newer wider wide new", "lowest newest er"], 40)
    text = " ".join(words)
    ids = tok.encode(text)
    assert tok.decode(ids) == text
    assert tok.encode(tok.decode(ids)) == ids


def test_save_load(tmp_path):
    tok = train_segmenter(["the cat sat on the mat", "the dog sat"], 30)
    tok.save(tmp_path / "v.bpe")
    back = Tokenizer.load(tmp_path / "v.bpe")
    assert back.vocab == tok.vocab
    assert back.segmenter.merges == tok.segmenter.merges
    assert back.encode("the cat") == tok.encode("the cat")


def test_load_rejects_other_files(tmp_path):
    (tmp_path / "x").write_text("hello\n")
    with pytest.raises(ValueError, match="not a pixelrep"):
        Tokenizer.load(tmp_path / "x")


def test_joint_single_language_matches_plain_training():
    lines = ["a rose is a rose", "is a rose", "roses are red"]
    joint = build_joint({"en": lines}, 25)
    plain = train_segmenter(lines, 25)
    assert joint.vocab == plain.vocab
    assert joint.segmenter.merges == plain.segmenter.merges


def test_joint_identical_corpora_match_single():
    lines = ["a rose is a rose", "is a rose", "roses are red"]
    joint = build_joint({"x": lines, "y": lines, "z": lines}, 25)
    assert set(joint.vocab.tokens) == set(train_segmenter(lines, 25).vocab.tokens)


def test_joint_size_error():
    with pytest.raises(ValueError):
        build_joint({"en": ["a b"]}, 0)


def test_union_set_arithmetic():
    a = vocab_tokenizer([MARKER + "a", MARKER + "b"])
    b = vocab_tokenizer([MARKER + "b", MARKER + "c"])
    u = build_union([a, b])
    assert u.vocab.tokens == [MARKER + "a", MARKER + "b", MARKER + "c"]
    disjoint = build_union([vocab_tokenizer(list("abcde")), vocab_tokenizer(list("vwxyz"))])
    assert disjoint.vocab.size == 10 + 4


def test_expansion_keeps_ids():
    base = vocab_tokenizer([MARKER + "a", MARKER + "b"])
    add = vocab_tokenizer([MARKER + "b", MARKER + "c"])
    expanded, plan = expand_vocabulary(base, add)
    assert plan.new_ids == (6,)
    assert plan.old_size == 6 and plan.new_size == 7
    for tok, i in base.vocab.id_of.items():
        assert expanded.vocab.id_of[tok] == i
    same, plan2 = expand_vocabulary(base, base)
    assert plan2.new_ids == ()
