import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rescap.errors import InvalidInputError, SequenceTooShortError
from rescap.text_conditioning import (
    BASE_WINDOW,
    RICHNESS_BLOCK,
    CaptionRecord,
    HarmfulLexicon,
    default_harmful_lexicon,
    encode_stub,
    extend_richness,
    filter_harmful,
    perturb_relevance,
    richness_schedule,
)

WORDS = st.lists(
    st.sampled_from("fox dog tree river stone cloud barn gate lamp moss".split()),
    min_size=1,
    max_size=75,
)


# -- encode_stub --------------------------------------------------------------


def test_encode_shape_and_eos_position():
    seq = encode_stub("a red fox", 8)
    assert seq.embeddings.shape == (BASE_WINDOW, 8)
    assert seq.eos_index == 4  # start token + 3 words
    assert seq.length == BASE_WINDOW


def test_encode_is_bit_identical():
    a = encode_stub("same caption text here", 16)
    b = encode_stub("same caption text here", 16)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)


def test_encode_pads_with_zeros_after_eos():
    seq = encode_stub("two words", 4)
    assert np.all(seq.embeddings[seq.eos_index + 1 :] == 0.0)
    assert np.any(seq.embeddings[seq.eos_index] != 0.0)


def test_encode_caps_at_window():
    seq = encode_stub(" ".join(["w"] * 200), 4)
    assert seq.length == BASE_WINDOW
    assert seq.eos_index == BASE_WINDOW - 1


def test_encode_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        encode_stub("", 8)
    with pytest.raises(InvalidInputError):
        encode_stub("ok", 0)


# -- extend_richness -----------------------------------------------------------


def _rich_seq(n_words: int = 30, d: int = 6):
    return encode_stub(" ".join(f"w{i}" for i in range(n_words)), d)


def test_extend_zero_is_identity_copy():
    seq = _rich_seq()
    out = extend_richness(seq, 0)
    np.testing.assert_array_equal(out.embeddings, seq.embeddings)
    assert out.eos_index == seq.eos_index
    assert out.embeddings is not seq.embeddings


@given(k=st.integers(min_value=0, max_value=12))
@settings(max_examples=30, deadline=None)
def test_extend_length_and_eos_law(k):
    seq = _rich_seq()
    out = extend_richness(seq, k)
    assert out.length == BASE_WINDOW + RICHNESS_BLOCK * k
    assert out.eos_index == seq.eos_index + RICHNESS_BLOCK * k


def test_extend_tiles_the_pre_eos_block():
    seq = _rich_seq()
    k = 3
    out = extend_richness(seq, k)
    eos = seq.eos_index
    block = seq.embeddings[eos - RICHNESS_BLOCK : eos]
    # original prefix unchanged
    np.testing.assert_array_equal(out.embeddings[:eos], seq.embeddings[:eos])
    # k copies of the 20-token block
    for rep in range(k):
        start = eos + rep * RICHNESS_BLOCK
        np.testing.assert_array_equal(
            out.embeddings[start : start + RICHNESS_BLOCK], block
        )
    # EOS re-appended, then the original padding
    np.testing.assert_array_equal(
        out.embeddings[out.eos_index :], seq.embeddings[eos:]
    )


def test_extend_requires_base_window_input():
    seq = extend_richness(_rich_seq(), 1)
    with pytest.raises(InvalidInputError):
        extend_richness(seq, 1)


def test_extend_needs_twenty_pre_eos_tokens():
    with pytest.raises(SequenceTooShortError):
        extend_richness(encode_stub("too short", 4), 1)
    # exactly 20 words is the boundary: eos_index 21 works
    extend_richness(encode_stub(" ".join(["w"] * RICHNESS_BLOCK), 4), 1)


def test_extend_rejects_negative_k():
    with pytest.raises(InvalidInputError):
        extend_richness(_rich_seq(), -1)


# -- richness_schedule ----------------------------------------------------------


def _schedule_oracle(target: int) -> int:
    # nearest achievable length; ties go to the smaller k
    best_k, best_err = 0, abs(BASE_WINDOW - target)
    for k in range(1, 64):
        err = abs(BASE_WINDOW + RICHNESS_BLOCK * k - target)
        if err < best_err:
            best_k, best_err = k, err
    return best_k


@pytest.mark.parametrize("target", range(BASE_WINDOW, 1050))
def test_schedule_matches_nearest_length_oracle(target):
    assert richness_schedule(target) == _schedule_oracle(target)


def test_schedule_achieved_length_within_ten_tokens():
    for target in range(BASE_WINDOW, 1050):
        k = richness_schedule(target)
        assert abs(BASE_WINDOW + RICHNESS_BLOCK * k - target) <= 10


def test_schedule_tie_rounds_down():
    # 87 is equidistant from 77 (k=0) and 97 (k=1)
    assert richness_schedule(87) == 0
    assert richness_schedule(107) == 1


def test_schedule_rejects_below_window():
    with pytest.raises(InvalidInputError):
        richness_schedule(BASE_WINDOW - 1)


# -- perturb_relevance -----------------------------------------------------------


@given(words=WORDS, ratio=st.floats(min_value=0.0, max_value=1.0), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_perturb_replaces_exact_floor_count(words, ratio, seed):
    record = CaptionRecord.from_text(" ".join(words))
    out = perturb_relevance(record, ratio, seed)
    assert out.word_count == record.word_count
    changed = sum(a != b for a, b in zip(record.text.split(), out.text.split()))
    expected = int(ratio * record.word_count)
    # every chosen position changes its core unless the filler already sat there
    assert changed <= expected
    fillers = {"the", "for"}
    if expected and not fillers & set(words):
        assert changed == expected


def test_perturb_is_deterministic():
    record = CaptionRecord.from_text("one two three four five six seven eight")
    a = perturb_relevance(record, 0.5, 99)
    b = perturb_relevance(record, 0.5, 99)
    assert a == b


def test_perturb_zero_ratio_is_identity():
    record = CaptionRecord.from_text("alpha beta gamma")
    assert perturb_relevance(record, 0.0, 1) is record


def test_perturb_keeps_punctuation():
    record = CaptionRecord.from_text("hills, rivers, valleys.")
    out = perturb_relevance(record, 1.0, 3)
    tokens = out.text.split()
    assert tokens[0].endswith(",") and tokens[1].endswith(",") and tokens[2].endswith(".")
    assert all(t.rstrip(",.") in ("the", "for") for t in tokens)


def test_perturb_validates_ratio():
    record = CaptionRecord.from_text("a b c")
    for ratio in (-0.1, 1.1):
        with pytest.raises(InvalidInputError):
            perturb_relevance(record, ratio, 0)


# -- filter_harmful ---------------------------------------------------------------


def test_filter_no_match_returns_text_unchanged():
    record = filter_harmful(CaptionRecord.from_text("A castle on a hill."))
    assert record.content_part == record.text
    assert record.degradation_part == ()


def test_filter_sentence_scope_removes_whole_sentence():
    text = "A castle on a hill. The image is blurry and dark. Birds circle above."
    record = filter_harmful(CaptionRecord.from_text(text), default_harmful_lexicon("sentence"))
    assert record.degradation_part == ("The image is blurry and dark.",)
    assert record.content_part == "A castle on a hill. Birds circle above."


def test_filter_clause_scope_removes_one_clause():
    text = "A harbor at dawn, slightly grainy, with red boats."
    record = filter_harmful(CaptionRecord.from_text(text), default_harmful_lexicon("clause"))
    assert record.degradation_part == ("slightly grainy,",)
    assert "harbor at dawn" in record.content_part
    assert "red boats" in record.content_part


def test_filter_phrase_scope_prefers_longest_match():
    text = "Portrait with a strong bokeh effect behind the subject."
    record = filter_harmful(CaptionRecord.from_text(text), default_harmful_lexicon("phrase"))
    assert record.degradation_part == ("bokeh effect",)


def test_filter_is_case_insensitive():
    record = filter_harmful(CaptionRecord.from_text("The photo looks BLURRY."))
    assert record.degradation_part


def test_filter_is_idempotent_on_content():
    text = "A pier at night. Noisy and overexposed shot. Waves below."
    lexicon = default_harmful_lexicon("sentence")
    once = filter_harmful(CaptionRecord.from_text(text), lexicon)
    twice = filter_harmful(CaptionRecord.from_text(once.content_part), lexicon)
    assert twice.degradation_part == ()
    assert twice.content_part == once.content_part


def test_filter_detects_every_default_phrase():
    from rescap.text_conditioning import _DEFAULT_HARMFUL_PHRASES

    for phrase in _DEFAULT_HARMFUL_PHRASES:
        text = f"A view of the valley. The picture is {phrase} overall."
        record = filter_harmful(CaptionRecord.from_text(text))
        assert record.degradation_part, phrase
        assert phrase not in record.content_part.lower()


@given(
    clean=st.lists(st.sampled_from("tree lake barn cloud ridge".split()), min_size=3, max_size=10),
    phrase=st.sampled_from(["blurry", "grainy", "out of focus", "bokeh effect"]),
)
@settings(max_examples=100, deadline=None)
def test_filter_partition_reassembles_text(clean, phrase):
    text = f"{' '.join(clean)}. This one is {phrase} today."
    record = filter_harmful(CaptionRecord.from_text(text))
    assert record.degradation_part
    rebuilt = record.content_part
    for span in record.degradation_part:
        rebuilt = f"{rebuilt} {span}".strip()
    assert sorted(rebuilt.split()) == sorted(text.split())


def test_lexicon_validation():
    with pytest.raises(InvalidInputError):
        HarmfulLexicon(phrases=())
    with pytest.raises(InvalidInputError):
        HarmfulLexicon(phrases=("ok", ""))
    with pytest.raises(InvalidInputError):
        HarmfulLexicon(phrases=("ok",), scope="paragraph")


def test_caption_record_dict_round_trip():
    record = filter_harmful(
        CaptionRecord.from_text("A pier. Very blurry shot.", declared_token_length=None)
    )
    assert CaptionRecord.from_dict(record.to_dict()) == record
