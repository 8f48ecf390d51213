"""
Speaker-attributed (cp, tcp) and speaker-agnostic (ORC, tcORC) WER.

cp-style metrics concatenate each speaker's utterances and find the best
speaker-to-stream bijection with the Hungarian algorithm; the smaller side is
padded with empty streams. ORC-style metrics assign every reference utterance
to one hypothesis stream, keeping time order inside each stream.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from tsasr.exceptions import EmptyInputError
from tsasr.metrics.wer import (
    TimedWords,
    advance_row,
    concatenate,
    join_words,
    pair_costs,
    time_constraint,
    timed_wer,
)
from tsasr.models import SegmentTranscript, WerCounts, sum_counts

logger = logging.getLogger(__name__)

TranscriptsBySpeaker = Mapping[str, Sequence[SegmentTranscript]]


@dataclass(frozen=True)
class PermutationResult:
    counts: WerCounts
    mapping: Dict[str, Optional[str]]  # reference speaker -> hypothesis stream
    unmatched_streams: Tuple[str, ...] = ()

    @property
    def rate(self) -> float:
        return self.counts.rate


@dataclass(frozen=True)
class OrcResult:
    counts: WerCounts
    assignment: Tuple[str, ...]  # stream of every time-ordered reference utterance

    @property
    def rate(self) -> float:
        return self.counts.rate


def _streams(
    transcripts: TranscriptsBySpeaker, timed: bool, interpolate: bool, normalize: bool
) -> Dict[str, TimedWords]:
    return {
        name: concatenate(segs, with_times=timed, interpolate=interpolate, normalize=normalize)
        for name, segs in transcripts.items()
    }


def _permutation_wer(
    references: TranscriptsBySpeaker,
    hypotheses: TranscriptsBySpeaker,
    collar: Optional[float],
    interpolate: bool,
    normalize: bool,
) -> PermutationResult:
    timed = collar is not None
    refs = _streams(references, timed, interpolate, normalize)
    hyps = _streams(hypotheses, timed, interpolate, normalize)
    ref_names, hyp_names = sorted(refs), sorted(hyps)
    if not ref_names and not hyp_names:
        raise EmptyInputError("Nothing to score: no reference speakers and no hypothesis streams")
    size = max(len(ref_names), len(hyp_names))
    empty = TimedWords.empty() if timed else TimedWords(words=())

    pair_counts: List[List[WerCounts]] = []
    for i in range(size):
        ref = refs[ref_names[i]] if i < len(ref_names) else empty
        pair_counts.append(
            [
                timed_wer(ref, hyps[hyp_names[j]] if j < len(hyp_names) else empty, collar)
                for j in range(size)
            ]
        )
    errors = np.array([[c.errors for c in row] for row in pair_counts], dtype=np.float64)
    rows, cols = linear_sum_assignment(errors)

    mapping: Dict[str, Optional[str]] = {}
    unmatched = []
    for r, c in zip(rows, cols):
        hyp_name = hyp_names[c] if c < len(hyp_names) else None
        if r < len(ref_names):
            mapping[ref_names[r]] = hyp_name
        elif hyp_name is not None:
            unmatched.append(hyp_name)
    counts = sum_counts([pair_counts[r][c] for r, c in zip(rows, cols)])
    return PermutationResult(counts=counts, mapping=mapping, unmatched_streams=tuple(unmatched))


def cp_wer(
    references: TranscriptsBySpeaker,
    hypotheses: TranscriptsBySpeaker,
    normalize: bool = False,
) -> PermutationResult:
    """Concatenated minimum-permutation WER."""
    return _permutation_wer(references, hypotheses, None, True, normalize)


def tcp_wer(
    references: TranscriptsBySpeaker,
    hypotheses: TranscriptsBySpeaker,
    collar: float = 5.0,
    interpolate: bool = True,
    normalize: bool = False,
) -> PermutationResult:
    """cpWER where aligned words must overlap in time up to ``collar`` seconds."""
    return _permutation_wer(references, hypotheses, collar, interpolate, normalize)


def _utterances(
    references: Sequence[SegmentTranscript] | TranscriptsBySpeaker,
    timed: bool,
    interpolate: bool,
    normalize: bool,
) -> List[TimedWords]:
    if isinstance(references, Mapping):
        references = [seg for segs in references.values() for seg in segs]
    ordered = sorted(references, key=lambda s: (s.start, s.end))
    return [
        concatenate([seg], with_times=timed, interpolate=interpolate, normalize=normalize)
        for seg in ordered
    ]


def _orc(
    utterances: Sequence[TimedWords],
    streams: Sequence[TimedWords],
    collar: Optional[float],
) -> Tuple[int, Tuple[int, ...]]:
    """Exact ORC by dynamic programming over per-stream edit-distance rows.

    The last edit-distance row of every stream fully determines the cost of
    any continuation, so assignments reaching the same rows are merged and
    states whose rows are elementwise worse than another state are dropped.
    """
    costs = [
        [pair_costs(u.words, s.words, time_constraint(u, s, collar)) for s in streams]
        for u in utterances
    ]
    start = tuple(np.arange(len(s) + 1, dtype=np.int64) for s in streams)
    states: Dict[Tuple[bytes, ...], Tuple[Tuple[np.ndarray, ...], Tuple[int, ...]]] = {
        tuple(r.tobytes() for r in start): (start, ())
    }
    for u, per_stream in enumerate(costs):
        next_states: Dict[Tuple[bytes, ...], Tuple[Tuple[np.ndarray, ...], Tuple[int, ...]]] = {}
        for rows, assignment in states.values():
            for c, stream_costs in enumerate(per_stream):
                new_rows = rows[:c] + (advance_row(rows[c], stream_costs),) + rows[c + 1 :]
                key = tuple(r.tobytes() for r in new_rows)
                if key not in next_states:
                    next_states[key] = (new_rows, assignment + (c,))
        states = _prune_dominated(next_states)
        logger.debug(f"ORC utterance {u}: {len(states)} live states")

    best_cost, best_assignment = None, ()
    for rows, assignment in states.values():
        cost = int(sum(r[-1] for r in rows))
        if best_cost is None or (cost, assignment) < (best_cost, best_assignment):
            best_cost, best_assignment = cost, assignment
    return int(best_cost or 0), best_assignment


def _prune_dominated(states):
    items = list(states.items())
    flat = [np.concatenate(rows) for _, (rows, _) in items]
    kept = {}
    for i, (key, value) in enumerate(items):
        dominated = any(
            j != i
            and np.all(flat[j] <= flat[i])
            and (np.any(flat[j] < flat[i]) or j < i)
            for j in range(len(items))
        )
        if not dominated:
            kept[key] = value
    return kept


def _orc_wer(
    references: Sequence[SegmentTranscript] | TranscriptsBySpeaker,
    hypotheses: TranscriptsBySpeaker,
    collar: Optional[float],
    interpolate: bool,
    normalize: bool,
) -> OrcResult:
    timed = collar is not None
    utterances = _utterances(references, timed, interpolate, normalize)
    names = sorted(hypotheses)
    if not names:
        words = sum(len(u) for u in utterances)
        return OrcResult(counts=WerCounts(deletions=words, reference_length=words), assignment=())
    streams = [
        concatenate(hypotheses[n], with_times=timed, interpolate=interpolate, normalize=normalize)
        for n in names
    ]
    _, assignment = _orc(utterances, streams, collar)
    counts = []
    for c, stream in enumerate(streams):
        mine = [u for u, a in zip(utterances, assignment) if a == c]
        counts.append(timed_wer(join_words(mine, timed), stream, collar))
    return OrcResult(counts=sum_counts(counts), assignment=tuple(names[a] for a in assignment))


def orc_wer(
    references: Sequence[SegmentTranscript] | TranscriptsBySpeaker,
    hypotheses: TranscriptsBySpeaker,
    normalize: bool = False,
) -> OrcResult:
    """Optimal reference combination WER: ignores speaker labels."""
    return _orc_wer(references, hypotheses, None, True, normalize)


def tc_orc_wer(
    references: Sequence[SegmentTranscript] | TranscriptsBySpeaker,
    hypotheses: TranscriptsBySpeaker,
    collar: float = 5.0,
    interpolate: bool = True,
    normalize: bool = False,
) -> OrcResult:
    return _orc_wer(references, hypotheses, collar, interpolate, normalize)


def tc_wer_family(
    references: TranscriptsBySpeaker,
    hypotheses: TranscriptsBySpeaker,
    collar: float,
    mode: Literal["cp", "orc"] = "cp",
    interpolate: bool = True,
    normalize: bool = False,
) -> PermutationResult | OrcResult:
    if mode == "cp":
        return tcp_wer(references, hypotheses, collar, interpolate, normalize)
    if mode == "orc":
        return tc_orc_wer(references, hypotheses, collar, interpolate, normalize)
    raise ValueError(f"Unknown time-constrained mode {mode!r}")


def brute_force_orc(
    references: Sequence[SegmentTranscript], hypotheses: TranscriptsBySpeaker
) -> int:
    """Minimum ORC error count by enumerating every assignment (small inputs only)."""
    utterances = _utterances(references, False, True, False)
    names = sorted(hypotheses)
    streams = [concatenate(hypotheses[n]) for n in names]
    best = None
    for assignment in itertools.product(range(len(streams)), repeat=len(utterances)):
        total = 0
        for c, stream in enumerate(streams):
            words = tuple(w for u, a in zip(utterances, assignment) if a == c for w in u.words)
            total += timed_wer(TimedWords(words=words), stream).errors
        best = total if best is None else min(best, total)
    return int(best or 0)
