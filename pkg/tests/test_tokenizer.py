import pytest

from tsasr.models import SegmentTranscript
from tsasr.tokenizer import Tokenizer, equal_word_times


@pytest.fixture
def tokenizer():
    return Tokenizer()


class TestTokenizer:
    def test_layout(self, tokenizer):
        """Test specials, characters and the contiguous timestamp range"""
        assert (tokenizer.blank, tokenizer.bos, tokenizer.eos) == (0, 1, 2)
        assert tokenizer.timestamp_begin == 3 + 53
        assert tokenizer.num_timestamps == 151
        assert tokenizer.vocab_size == tokenizer.timestamp_begin + 151

    def test_ctc_labels_exclude_timestamps(self, tokenizer):
        """Test the CTC label set is blank plus characters"""
        ids = tokenizer.ctc_token_ids
        assert ids[0] == tokenizer.blank
        assert not any(tokenizer.is_timestamp(t) for t in ids)
        assert tokenizer.bos not in ids and tokenizer.eos not in ids

    def test_timestamp_rounding(self, tokenizer):
        """Test times snap to the 0.2 s grid and clamp to the window"""
        assert tokenizer.token_time(tokenizer.timestamp_token(1.29)) == pytest.approx(1.2)
        assert tokenizer.token_time(tokenizer.timestamp_token(99.0)) == pytest.approx(30.0)

    def test_text_roundtrip(self, tokenizer):
        """Test text encodes and decodes unchanged"""
        assert tokenizer.decode_text(tokenizer.encode_text("ab Cd")) == "ab Cd"

    def test_unknown_character(self, tokenizer):
        """Test characters outside the vocabulary are rejected"""
        with pytest.raises(ValueError):
            tokenizer.encode_text("a1")

    def test_encode_segments(self, tokenizer):
        """Test BOS, timestamp-wrapped segments and EOS"""
        segs = [SegmentTranscript("A", 1.0, 2.0, ("ab",))]
        tokens = tokenizer.encode_segments(segs)
        assert tokens[0] == tokenizer.bos and tokens[-1] == tokenizer.eos
        assert tokens[1] == tokenizer.timestamp_token(1.0)
        assert tokens[-2] == tokenizer.timestamp_token(2.0)
        assert tokenizer.decode_text(tokens) == "ab"

    def test_decode_tokens(self, tokenizer):
        """Test decoding restores segment times relative to the window start"""
        segs = [
            SegmentTranscript("A", 0.4, 1.0, ("ab", "c")),
            SegmentTranscript("A", 2.0, 3.0, ("d",)),
        ]
        tokens = tokenizer.encode_segments(segs)
        decoded = tokenizer.decode_tokens(tokens, window_start=30.0, speaker="A", session_id="s")
        assert [s.words for s in decoded] == [("ab", "c"), ("d",)]
        assert decoded[0].start == pytest.approx(30.4)
        assert decoded[1].end == pytest.approx(33.0)
        assert [pytest.approx(pair) for pair in ((30.4, 30.7), (30.7, 31.0))] == list(decoded[0].word_times)

    def test_unterminated_segment_ends_at_window_end(self, tokenizer):
        """Test text without a closing timestamp runs to the window end"""
        tokens = [tokenizer.bos, tokenizer.timestamp_token(1.0)] + tokenizer.encode_text("ab")
        decoded = tokenizer.decode_tokens(tokens, window_start=0.0, window_end=12.0)
        assert decoded[0].end == pytest.approx(12.0)

    def test_case_variants(self, tokenizer):
        """Test lower/upper variants only when enabled"""
        assert tokenizer.case_variants("Ab", False) == ["Ab"]
        assert tokenizer.case_variants("Ab", True) == ["ab", "AB"]
        assert tokenizer.case_variants(" ", True) == [" "]


def test_equal_word_times():
    """Test segment time is split evenly among words"""
    assert equal_word_times(0.0, 3.0, 3) == ((0.0, 1.0), (1.0, 2.0), (2.0, 3.0))
    assert equal_word_times(1.0, 2.0, 0) == ()
