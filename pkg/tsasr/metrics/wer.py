"""
Levenshtein word alignment with an optional pair constraint.

``allowed[i, j]`` says whether reference word i may be aligned (match or
substitution) to hypothesis word j. A disallowed pair can only be scored as a
deletion plus an insertion, which is how the time-constrained metrics enter.
"""

import logging
import re
import string
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from tsasr.exceptions import MissingWordTimesError
from tsasr.models import SegmentTranscript, WerCounts
from tsasr.tokenizer import equal_word_times

logger = logging.getLogger(__name__)

BLOCKED = np.iinfo(np.int64).max // 4
_PUNCTUATION = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_words(words: Sequence[str], enabled: bool = True) -> Tuple[str, ...]:
    """Lowercase and strip punctuation; words that become empty are dropped."""
    if not enabled:
        return tuple(words)
    cleaned = (_PUNCTUATION.sub("", w.lower()) for w in words)
    return tuple(w for w in cleaned if w)


@dataclass(frozen=True)
class TimedWords:
    """A stream of words with optional ``[n, 2]`` start/end times."""

    words: Tuple[str, ...]
    times: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def empty(cls) -> "TimedWords":
        return cls(words=(), times=np.zeros((0, 2)))


def concatenate(
    segments: Sequence[SegmentTranscript],
    with_times: bool = False,
    interpolate: bool = True,
    normalize: bool = False,
) -> TimedWords:
    """Time-ordered concatenation of segments (ties broken by end time)."""
    words = []
    times = []
    for seg in sorted(segments, key=lambda s: (s.start, s.end)):
        seg_words = seg.words
        if with_times:
            seg_times = seg.word_times
            if seg_times is None:
                if not interpolate:
                    raise MissingWordTimesError(seg.speaker)
                seg_times = equal_word_times(seg.start, seg.end, len(seg_words))
            for word, word_time in zip(seg_words, seg_times):
                for cleaned in normalize_words([word], normalize):
                    words.append(cleaned)
                    times.append(word_time)
        else:
            words.extend(normalize_words(seg_words, normalize))
    if not with_times:
        return TimedWords(words=tuple(words))
    return TimedWords(words=tuple(words), times=np.asarray(times, dtype=np.float64).reshape(-1, 2))


def time_constraint(ref: TimedWords, hyp: TimedWords, collar: Optional[float]) -> Optional[np.ndarray]:
    """Pairs whose intervals intersect once the reference is widened by the collar."""
    if collar is None or not np.isfinite(collar):
        return None
    if ref.times is None or hyp.times is None:
        raise ValueError("Time-constrained alignment needs word times on both sides")
    ref_start = ref.times[:, 0:1] - collar
    ref_end = ref.times[:, 1:2] + collar
    return (hyp.times[None, :, 0] <= ref_end) & (hyp.times[None, :, 1] >= ref_start)


def pair_costs(ref: Sequence[str], hyp: Sequence[str], allowed: Optional[np.ndarray]) -> np.ndarray:
    costs = (np.asarray(ref, dtype=object)[:, None] != np.asarray(hyp, dtype=object)[None, :]).astype(np.int64)
    if allowed is not None:
        costs = np.where(allowed, costs, BLOCKED)
    return costs.reshape(len(ref), len(hyp))


def advance_row(row: np.ndarray, pair_costs: np.ndarray) -> np.ndarray:
    """Extend an edit-distance row by the reference words of ``pair_costs``.

    ``row[j]`` is the cost of aligning the reference seen so far with the first
    j hypothesis words; each reference word adds one row.
    """
    steps = np.arange(row.shape[0], dtype=np.int64)
    for costs in pair_costs:
        candidate = row + 1
        candidate[1:] = np.minimum(candidate[1:], row[:-1] + costs)
        # insertions: cur[j] = min_k candidate[k] + (j - k)
        row = np.minimum.accumulate(candidate - steps) + steps
    return row


def edit_matrix(
    ref: Sequence[str], hyp: Sequence[str], allowed: Optional[np.ndarray] = None
) -> np.ndarray:
    """Full ``(N + 1) x (M + 1)`` Levenshtein cost matrix."""
    costs = pair_costs(ref, hyp, allowed)
    matrix = np.empty((len(ref) + 1, len(hyp) + 1), dtype=np.int64)
    matrix[0] = np.arange(len(hyp) + 1)
    for i in range(len(ref)):
        matrix[i + 1] = advance_row(matrix[i], costs[i : i + 1])
    return matrix


def wer(
    ref: Sequence[str] | str, hyp: Sequence[str] | str, allowed: Optional[np.ndarray] = None
) -> WerCounts:
    """Levenshtein-minimal substitution/insertion/deletion counts.

    Strings are split on whitespace. When several alignments reach the minimum
    the backtrace prefers match/substitution, then deletion.
    """
    ref_words = ref.split() if isinstance(ref, str) else list(ref)
    hyp_words = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref_words or not hyp_words:
        return WerCounts(
            insertions=len(hyp_words), deletions=len(ref_words), reference_length=len(ref_words)
        )
    costs = pair_costs(ref_words, hyp_words, allowed)
    matrix = edit_matrix(ref_words, hyp_words, allowed)

    subs = ins = dels = 0
    i, j = len(ref_words), len(hyp_words)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and costs[i - 1, j - 1] < BLOCKED and matrix[i, j] == matrix[i - 1, j - 1] + costs[i - 1, j - 1]:
            subs += int(costs[i - 1, j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and matrix[i, j] == matrix[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerCounts(
        substitutions=subs, insertions=ins, deletions=dels, reference_length=len(ref_words)
    )


def timed_wer(ref: TimedWords, hyp: TimedWords, collar: Optional[float] = None) -> WerCounts:
    return wer(ref.words, hyp.words, time_constraint(ref, hyp, collar))


def join_words(parts: Sequence[TimedWords], timed: bool) -> TimedWords:
    words = tuple(w for p in parts for w in p.words)
    if not timed:
        return TimedWords(words=words)
    times = [p.times for p in parts if p.times is not None]
    return TimedWords(words=words, times=np.concatenate(times).reshape(-1, 2) if times else np.zeros((0, 2)))
