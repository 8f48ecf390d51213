import logging
import string
from dataclasses import dataclass
from typing import List, Optional, Sequence

from tsasr.models import SegmentTranscript

logger = logging.getLogger(__name__)

CHARACTERS = " " + string.ascii_lowercase + string.ascii_uppercase
TIME_RESOLUTION = 0.2
WINDOW_SECONDS = 30.0


@dataclass(frozen=True)
class Tokenizer:
    """Character vocabulary with blank/BOS/EOS specials and timestamp tokens.

    Layout: blank, BOS, EOS, characters, then one token per TIME_RESOLUTION step
    from 0 s to WINDOW_SECONDS inclusive (a contiguous id range).
    """

    characters: str = CHARACTERS
    time_resolution: float = TIME_RESOLUTION
    window_seconds: float = WINDOW_SECONDS

    blank: int = 0
    bos: int = 1
    eos: int = 2

    @property
    def char_offset(self) -> int:
        return 3

    @property
    def timestamp_begin(self) -> int:
        return self.char_offset + len(self.characters)

    @property
    def num_timestamps(self) -> int:
        return int(round(self.window_seconds / self.time_resolution)) + 1

    @property
    def timestamp_end(self) -> int:
        """One past the last timestamp id."""
        return self.timestamp_begin + self.num_timestamps

    @property
    def vocab_size(self) -> int:
        return self.timestamp_end

    @property
    def ctc_token_ids(self) -> List[int]:
        """Labels the CTC head scores: blank plus characters (no timestamps)."""
        return [self.blank] + list(range(self.char_offset, self.timestamp_begin))

    def is_timestamp(self, token: int) -> bool:
        return self.timestamp_begin <= token < self.timestamp_end

    def timestamp_token(self, seconds: float) -> int:
        steps = int(round(seconds / self.time_resolution))
        steps = min(max(steps, 0), self.num_timestamps - 1)
        return self.timestamp_begin + steps

    def token_time(self, token: int) -> float:
        if not self.is_timestamp(token):
            raise ValueError(f"Token {token} is not a timestamp")
        return (token - self.timestamp_begin) * self.time_resolution

    def encode_text(self, text: str) -> List[int]:
        ids = []
        for ch in text:
            index = self.characters.find(ch)
            if index < 0:
                raise ValueError(f"Character {ch!r} is not in the vocabulary")
            ids.append(self.char_offset + index)
        return ids

    def decode_text(self, tokens: Sequence[int]) -> str:
        return "".join(
            self.characters[t - self.char_offset]
            for t in tokens
            if self.char_offset <= t < self.timestamp_begin
        )

    def ctc_labels(self, text: str) -> List[int]:
        return self.encode_text(" ".join(text.split()))

    def encode_segments(
        self, segments: Sequence[SegmentTranscript], window_start: float = 0.0
    ) -> List[int]:
        """BOS, then ``<|start|> text <|end|>`` per segment, then EOS."""
        tokens = [self.bos]
        for seg in sorted(segments, key=lambda s: s.start):
            tokens.append(self.timestamp_token(seg.start - window_start))
            tokens.extend(self.encode_text(" ".join(seg.words)))
            tokens.append(self.timestamp_token(seg.end - window_start))
        tokens.append(self.eos)
        return tokens

    def decode_tokens(
        self,
        tokens: Sequence[int],
        window_start: float = 0.0,
        window_end: Optional[float] = None,
        speaker: str = "",
        session_id: str = "",
    ) -> List[SegmentTranscript]:
        """Turn a decoded token sequence back into timed segments.

        Word times split each segment's span equally among its words. Text that
        precedes any timestamp starts at the window start; a segment left open at
        the end of the sequence closes at ``window_end``.
        """
        if window_end is None:
            window_end = window_start + self.window_seconds
        segments: List[SegmentTranscript] = []
        start: Optional[float] = None
        chars: List[int] = []

        def flush(end: float) -> None:
            words = tuple(self.decode_text(chars).split())
            seg_start = window_start if start is None else start
            end = max(end, seg_start)
            if words:
                segments.append(
                    SegmentTranscript(
                        speaker=speaker,
                        start=seg_start,
                        end=end,
                        words=words,
                        word_times=equal_word_times(seg_start, end, len(words)),
                        session_id=session_id,
                    )
                )

        for token in tokens:
            if token in (self.bos, self.blank):
                continue
            if token == self.eos:
                break
            if self.is_timestamp(token):
                time = window_start + self.token_time(token)
                if chars:
                    flush(time)
                    chars = []
                    start = None
                else:
                    start = time
            else:
                chars.append(token)
        if chars:
            flush(window_end)
        return segments

    def case_variants(self, text: str, enabled: bool) -> List[str]:
        if not enabled:
            return [text]
        lower, upper = text.lower(), text.upper()
        return [lower] if lower == upper else [lower, upper]


def equal_word_times(start: float, end: float, count: int) -> tuple[tuple[float, float], ...]:
    """Pseudo word timing: split [start, end] into ``count`` equal pieces."""
    if count == 0:
        return ()
    step = (end - start) / count
    bounds = [start + i * step for i in range(count)] + [end]
    return tuple((bounds[i], bounds[i + 1]) for i in range(count))
