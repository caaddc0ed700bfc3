import pytest

from labsdub.core import (
    ALL_TAGS,
    EOS,
    STATUS_OK,
    DecodeResult,
    Hypothesis,
    LengthTag,
    SourceUtterance,
    Vocabulary,
    VocabularyError,
    rank,
    tag_token_id,
)


@pytest.fixture
def vocab():
    return Vocabulary.build(["a", "b", "c"])


def test_tag_ids_follow_build_layout(vocab):
    assert tag_token_id(vocab, LengthTag.SHORT) == 1
    assert tag_token_id(vocab, LengthTag.LONG) == 3
    assert vocab.eos_id == 0


def test_tag_round_trip(vocab):
    for tag in ALL_TAGS:
        assert vocab.tag_of(tag_token_id(vocab, tag)) == tag
    assert len({tag_token_id(vocab, t) for t in ALL_TAGS}) == 3


def test_tag_lookup_with_custom_layout():
    v = Vocabulary(("x", "<L>", "END", "<N>", "<S>"), eos="END", tag_tokens=("<S>", "<N>", "<L>"))
    assert tag_token_id(v, "short") == 4
    assert tag_token_id(v, "<long>") == 1
    assert v.eos_id == 2
    assert v.word_ids() == [0, 2]


def test_length_tag_parse():
    assert LengthTag.parse("<short>") is LengthTag.SHORT
    assert LengthTag.parse(" Long ") is LengthTag.LONG
    assert len(LengthTag) == 3
    with pytest.raises(ValueError):
        LengthTag.parse("medium")


@pytest.mark.parametrize(
    "tokens",
    [
        ("<eos>", "<short>", "<normal>", "<long>", "a", "a"),
        ("<eos>", "<short>", "<normal>", "a"),
        ("<eos>", "<short>", "<normal>", "<long>", "a b"),
        ("<eos>", "<short>", "<normal>", "<long>", ""),
    ],
)
def test_vocabulary_rejects_bad_token_lists(tokens):
    with pytest.raises(VocabularyError):
        Vocabulary(tokens)


def test_specials_must_be_distinct():
    with pytest.raises(VocabularyError):
        Vocabulary(("<eos>", "<s>", "<n>"), tag_tokens=("<s>", "<n>", "<eos>"))


def test_build_dedups_and_keeps_order():
    v = Vocabulary.build(["b", "a", "b", EOS, "<short>"])
    assert v.tokens == (EOS, "<short>", "<normal>", "<long>", "b", "a")


def test_save_load_is_byte_identical(tmp_path):
    v = Vocabulary(("x", "<L>", "END", "<N>", "<S>", "y"), eos="END", tag_tokens=("<S>", "<N>", "<L>"))
    first = tmp_path / "v1.txt"
    v.save(first)
    loaded = Vocabulary.load(first)
    assert loaded == v
    assert [loaded.id(t) for t in v.tokens] == list(range(len(v)))
    second = tmp_path / "v2.txt"
    loaded.save(second)
    assert first.read_bytes() == second.read_bytes()


def test_vocabulary_file_header(vocab):
    text = vocab.dumps()
    assert text.splitlines()[0] == "#labsdub-vocab v1 eos=<eos> short=<short> normal=<normal> long=<long>"
    with pytest.raises(VocabularyError):
        Vocabulary.loads("\n".join(text.splitlines()[1:]))
    with pytest.raises(VocabularyError):
        Vocabulary.loads(text.replace("v1", "v9", 1))


def test_detokenize_drops_specials(vocab):
    ids = [tag_token_id(vocab, "normal"), vocab.id("a"), vocab.id("c"), vocab.eos_id]
    assert vocab.detokenize(ids) == "a c"


def test_rank_breaks_ties_lexicographically():
    a = Hypothesis(LengthTag.NORMAL, (2, 5, 0), -1.0, True)
    b = Hypothesis(LengthTag.NORMAL, (2, 4, 0), -1.0, True)
    c = Hypothesis(LengthTag.SHORT, (1, 0), -0.5, True)
    assert rank([a, b, c]) == [c, b, a]
    assert c.length == 1


def test_decode_result_rejects_incomplete(vocab):
    h = Hypothesis(LengthTag.NORMAL, (2, 4), -1.0, False)
    with pytest.raises(ValueError):
        DecodeResult(vocab, (LengthTag.NORMAL,), (h,), {LengthTag.NORMAL: STATUS_OK})


def test_decode_result_record_round_trip(vocab):
    hyps = (
        Hypothesis(LengthTag.NORMAL, (2, 4, 0), -0.25, True),
        Hypothesis(LengthTag.SHORT, (1, 0), -0.5, True),
        Hypothesis(LengthTag.NORMAL, (2, 5, 6, 0), -1.75, True),
    )
    status = {t: STATUS_OK for t in (LengthTag.SHORT, LengthTag.NORMAL)}
    res = DecodeResult(vocab, (LengthTag.SHORT, LengthTag.NORMAL), hyps, status, expansions=7, wall_time=0.5)
    rec = res.to_record("u1", "labs")
    assert rec["tags"]["normal"]["hypotheses"][0]["text"] == "a"
    back = DecodeResult.from_record(rec, vocab)
    assert back.nbest == hyps
    assert back.status == status
    assert back.expansions == 7
    assert res.best("normal").score == -0.25
    assert [h.score for h in res.by_tag("normal")] == [-0.25, -1.75]


def test_source_utterance_validation():
    u = SourceUtterance.from_record({"id": 3, "phonemes": "A B", "reference_duration": 1.5})
    assert u.id == "3" and u.phonemes == ("A", "B")
    assert SourceUtterance.from_record(u.to_record()) == u
    with pytest.raises(ValueError):
        SourceUtterance("x", (), 1.0)
    with pytest.raises(ValueError):
        SourceUtterance("x", ("A",), -0.1)
    assert SourceUtterance("x", ("A",), 0.0).reference_duration == 0.0
