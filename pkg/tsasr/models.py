import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, Literal, Optional, Sequence, Tuple

import numpy as np

from tsasr.types import FloatArray

TrainingPhase = Literal["ctc_preheat", "fddt_preheat", "full"]
EventType = Literal["step", "eval", "phase_start", "phase_end", "early_stop"]


@dataclass(frozen=True)
class DiarizationSegment:
    speaker: str
    start: float
    end: float
    recording: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"Segment times must be finite: {self.start}, {self.end}")
        if self.start < 0:
            raise ValueError(f"Segment start must be >= 0, got {self.start}")
        if self.end <= self.start:
            raise ValueError(f"Segment end {self.end} must exceed start {self.start}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SpeakerActivity:
    """Per-speaker, per-frame activity probabilities D in [0, 1]^{S x T}."""

    values: FloatArray
    frame_rate: float
    speaker_labels: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"Activity must be a non-empty S x T matrix, got {values.shape}")
        if values.shape[0] != len(self.speaker_labels):
            raise ValueError(
                f"{values.shape[0]} activity rows for {len(self.speaker_labels)} speaker labels"
            )
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("Activity values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def num_speakers(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    def index_of(self, speaker: str) -> int:
        return self.speaker_labels.index(speaker)

    def to_json(self) -> Dict[str, Any]:
        return {
            "speaker_labels": list(self.speaker_labels),
            "frame_rate": self.frame_rate,
            "rows": self.values.tolist(),
        }


@dataclass(frozen=True)
class StnoMask:
    """Rows (p_S, p_T, p_N, p_O) per frame for one target speaker."""

    values: FloatArray
    target_index: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != 4:
            raise ValueError(f"STNO mask must be T x 4, got {values.shape}")
        object.__setattr__(self, "values", np.clip(values, 0.0, 1.0))

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def target_activity(self) -> FloatArray:
        """p_T + p_O, i.e. d(s_k, t)."""
        return self.values[:, 1] + self.values[:, 3]

    def target_flags(self, threshold: float = 0.5) -> np.ndarray:
        return self.target_activity >= threshold


@dataclass(frozen=True)
class SegmentTranscript:
    speaker: str
    start: float
    end: float
    words: Tuple[str, ...]
    word_times: Optional[Tuple[Tuple[float, float], ...]] = None
    session_id: str = ""

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"Transcript end {self.end} precedes start {self.start}")
        object.__setattr__(self, "words", tuple(self.words))
        if self.word_times is not None:
            times = tuple((float(s), float(e)) for s, e in self.word_times)
            if len(times) != len(self.words):
                raise ValueError(f"{len(times)} word times for {len(self.words)} words")
            previous_end = self.start
            for s, e in times:
                if s < self.start - 1e-9 or e > self.end + 1e-9 or e < s:
                    raise ValueError(f"Word time ({s}, {e}) outside [{self.start}, {self.end}]")
                if s < previous_end - 1e-9:
                    raise ValueError("Word times must be ordered and non-overlapping")
                previous_end = e
            object.__setattr__(self, "word_times", times)

    def to_json(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "session_id": self.session_id,
            "speaker": self.speaker,
            "start_time": self.start,
            "end_time": self.end,
            "words": " ".join(self.words),
        }
        if self.word_times is not None:
            data["word_times"] = [list(t) for t in self.word_times]
        return data

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "SegmentTranscript":
        words = data.get("words", "")
        if isinstance(words, str):
            words = words.split()
        times = data.get("word_times")
        return cls(
            speaker=str(data["speaker"]),
            start=float(data["start_time"]),
            end=float(data["end_time"]),
            words=tuple(words),
            word_times=tuple(tuple(t) for t in times) if times is not None else None,
            session_id=str(data.get("session_id", "")),
        )


@dataclass(frozen=True)
class WerCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        """Error rate; infinity marks errors against an empty reference."""
        if self.reference_length == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.reference_length

    def __add__(self, other: "WerCounts") -> "WerCounts":
        return WerCounts(
            substitutions=self.substitutions + other.substitutions,
            insertions=self.insertions + other.insertions,
            deletions=self.deletions + other.deletions,
            reference_length=self.reference_length + other.reference_length,
        )

    def to_json(self) -> Dict[str, Any]:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "reference_length": self.reference_length,
            "errors": self.errors,
            "rate": self.rate,
        }


def sum_counts(counts: Sequence[WerCounts]) -> WerCounts:
    total = WerCounts()
    for c in counts:
        total = total + c
    return total


@dataclass(frozen=True)
class TrainingEvent:
    event: EventType
    phase: TrainingPhase
    step: int
    values: Dict[str, float] = field(default_factory=dict)
    timestamp: datetime = field(default_factory=datetime.now)

    def __str__(self):
        metrics = ", ".join(f"{k}={v:.4g}" for k, v in self.values.items())
        return f"{self.event} in {self.phase} at step {self.step}: {metrics}"

    def to_json(self) -> Dict[str, Any]:
        return {
            "event": self.event,
            "phase": self.phase,
            "step": self.step,
            **self.values,
            "timestamp": self.timestamp.isoformat(),
        }
