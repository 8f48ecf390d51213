import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Set, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from tsasr.models import DiarizationSegment

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DerResult:
    """Error durations in seconds over the scored reference speech time."""

    miss: float
    false_alarm: float
    confusion: float
    total: float
    mapping: Dict[str, str] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        """NaN when there is no scored reference speech."""
        if self.total <= 0:
            return math.nan
        return (self.miss + self.false_alarm + self.confusion) / self.total

    def __add__(self, other: "DerResult") -> "DerResult":
        return DerResult(
            miss=self.miss + other.miss,
            false_alarm=self.false_alarm + other.false_alarm,
            confusion=self.confusion + other.confusion,
            total=self.total + other.total,
        )

    def to_json(self) -> Dict[str, Any]:
        fraction = (lambda x: x / self.total) if self.total > 0 else (lambda x: math.nan)
        return {
            "der": self.rate,
            "miss": self.miss,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "miss_rate": fraction(self.miss),
            "false_alarm_rate": fraction(self.false_alarm),
            "confusion_rate": fraction(self.confusion),
            "scored_speech": self.total,
            "mapping": dict(self.mapping),
        }


def _active(segments: Sequence[DiarizationSegment], t: float) -> Set[str]:
    return {s.speaker for s in segments if s.start <= t < s.end}


def _no_score_zones(segments: Sequence[DiarizationSegment], collar: float) -> List[Tuple[float, float]]:
    if collar <= 0:
        return []
    edges = sorted({b for s in segments for b in (s.start, s.end)})
    return [(max(0.0, b - collar), b + collar) for b in edges]


def _elementary_intervals(
    reference: Sequence[DiarizationSegment],
    hypothesis: Sequence[DiarizationSegment],
    zones: Sequence[Tuple[float, float]],
) -> List[Tuple[float, Set[str], Set[str]]]:
    """(duration, reference speakers, hypothesis speakers) per scored interval."""
    bounds = sorted(
        {b for s in (*reference, *hypothesis) for b in (s.start, s.end)}
        | {b for z in zones for b in z}
    )
    intervals = []
    for a, b in zip(bounds, bounds[1:]):
        mid = 0.5 * (a + b)
        if b <= a or any(lo <= mid < hi for lo, hi in zones):
            continue
        intervals.append((b - a, _active(reference, mid), _active(hypothesis, mid)))
    return intervals


def der(
    reference: Sequence[DiarizationSegment],
    hypothesis: Sequence[DiarizationSegment],
    collar: float = 0.0,
) -> DerResult:
    """Diarization error rate with an optimal one-to-one speaker mapping.

    The mapping maximises the total overlap between mapped speakers. With a
    positive collar, ``±collar`` around every reference boundary is not scored.
    """
    intervals = _elementary_intervals(reference, hypothesis, _no_score_zones(reference, collar))
    ref_names = sorted({s.speaker for s in reference})
    hyp_names = sorted({s.speaker for s in hypothesis})

    overlap = np.zeros((len(ref_names), len(hyp_names)))
    for duration, refs, hyps in intervals:
        for r in refs:
            for h in hyps:
                overlap[ref_names.index(r), hyp_names.index(h)] += duration
    mapping: Dict[str, str] = {}
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        mapping = {ref_names[r]: hyp_names[c] for r, c in zip(rows, cols)}

    miss = false_alarm = confusion = total = 0.0
    for duration, refs, hyps in intervals:
        correct = sum(1 for r in refs if mapping.get(r) in hyps)
        miss += duration * max(0, len(refs) - len(hyps))
        false_alarm += duration * max(0, len(hyps) - len(refs))
        confusion += duration * (min(len(refs), len(hyps)) - correct)
        total += duration * len(refs)
    if total <= 0:
        logger.warning("No scored reference speech; DER is undefined")
    return DerResult(
        miss=miss, false_alarm=false_alarm, confusion=confusion, total=total, mapping=mapping
    )
