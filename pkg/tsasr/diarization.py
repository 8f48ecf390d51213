import json
import logging
import math
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from tsasr.exceptions import EmptyInputError, RttmParseError, UnknownSpeakerError
from tsasr.models import DiarizationSegment, SpeakerActivity, StnoMask

logger = logging.getLogger(__name__)

DEFAULT_FRAME_RATE = 50.0
TARGET_THRESHOLD = 0.5


def parse_rttm(text: str) -> List[DiarizationSegment]:
    """Parse RTTM content into diarization segments.

    Only ``SPEAKER`` lines are read:
    ``SPEAKER <rec> <chan> <tbeg> <tdur> <NA> <NA> <spk> <NA> <NA>``.
    Everything else (comments, other record types, blank lines) is skipped.
    """
    segments: List[DiarizationSegment] = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmParseError(line_number, f"expected at least 8 fields, got {len(fields)}")
        try:
            begin = float(fields[3])
            duration = float(fields[4])
        except ValueError:
            raise RttmParseError(
                line_number, f"invalid time fields '{fields[3]}' '{fields[4]}'"
            ) from None
        if not (math.isfinite(begin) and math.isfinite(duration)) or begin < 0 or duration <= 0:
            raise RttmParseError(line_number, f"invalid segment begin={begin} duration={duration}")
        segments.append(
            DiarizationSegment(
                speaker=fields[7], start=begin, end=begin + duration, recording=fields[1]
            )
        )
    return segments


def write_rttm(segments: Iterable[DiarizationSegment]) -> str:
    lines = [
        f"SPEAKER {seg.recording or 'rec'} 1 {seg.start:.3f} {seg.duration:.3f} <NA> <NA> {seg.speaker} <NA> <NA>"
        for seg in segments
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def group_by_recording(
    segments: Iterable[DiarizationSegment],
) -> Dict[str, List[DiarizationSegment]]:
    grouped: Dict[str, List[DiarizationSegment]] = defaultdict(list)
    for seg in segments:
        grouped[seg.recording].append(seg)
    return dict(grouped)


def frame_centers(num_frames: int, frame_rate: float) -> np.ndarray:
    return (np.arange(num_frames, dtype=np.float64) + 0.5) / frame_rate


def activity_matrix(
    segments: Sequence[DiarizationSegment],
    frame_rate: float = DEFAULT_FRAME_RATE,
    duration: Optional[float] = None,
    speakers: Optional[Sequence[str]] = None,
) -> SpeakerActivity:
    """Rasterize segments to a binary activity matrix by frame-center membership.

    Frame t covers [t / rate, (t + 1) / rate) and is active for speaker s when its
    center lies in any of s's half-open segments. Speakers are ordered by first
    appearance unless ``speakers`` fixes the order (and may add silent speakers).
    Segments extending past ``duration`` are clipped.
    """
    if frame_rate <= 0:
        raise ValueError(f"frame_rate must be positive, got {frame_rate}")
    if duration is None:
        duration = max((seg.end for seg in segments), default=0.0)
    labels: List[str] = list(speakers) if speakers is not None else []
    for seg in segments:
        if seg.speaker not in labels:
            if speakers is not None:
                raise UnknownSpeakerError(seg.speaker, labels)
            labels.append(seg.speaker)
    num_frames = int(math.ceil(duration * frame_rate - 1e-9))
    if num_frames <= 0 or not labels:
        raise EmptyInputError("Cannot rasterize an empty diarization")

    centers = frame_centers(num_frames, frame_rate)
    values = np.zeros((len(labels), num_frames), dtype=np.float64)
    for seg in segments:
        row = labels.index(seg.speaker)
        values[row, (centers >= seg.start) & (centers < seg.end)] = 1.0
    return SpeakerActivity(values=values, frame_rate=frame_rate, speaker_labels=tuple(labels))


def binarize(activity: SpeakerActivity, threshold: float = TARGET_THRESHOLD) -> SpeakerActivity:
    """Turn soft activity into the hard decisions used for training and decoding."""
    return SpeakerActivity(
        values=(activity.values >= threshold).astype(np.float64),
        frame_rate=activity.frame_rate,
        speaker_labels=activity.speaker_labels,
    )


def stno_mask(activity: SpeakerActivity, target_index: int) -> StnoMask:
    """Silence / target / non-target / overlap probabilities for one target speaker.

    p_S = prod_s (1 - d_s), p_T = d_k prod_{s != k} (1 - d_s),
    p_N = (1 - p_S) - d_k and p_O = d_k - p_T.
    """
    if not 0 <= target_index < activity.num_speakers:
        raise UnknownSpeakerError(str(target_index), activity.speaker_labels)
    d = activity.values
    d_target = d[target_index]
    others = np.prod(1.0 - np.delete(d, target_index, axis=0), axis=0)
    p_silence = np.prod(1.0 - d, axis=0)
    p_target = d_target * others
    p_nontarget = (1.0 - p_silence) - d_target
    p_overlap = d_target - p_target
    values = np.stack([p_silence, p_target, p_nontarget, p_overlap], axis=1)

    # p_N is a difference and can dip below zero by rounding
    negative = np.any(values < 0.0, axis=1)
    if np.any(negative):
        clipped = np.clip(values[negative], 0.0, None)
        values[negative] = clipped / clipped.sum(axis=1, keepdims=True)
    return StnoMask(values=values, target_index=target_index)


def stno_masks(activity: SpeakerActivity) -> List[StnoMask]:
    return [stno_mask(activity, k) for k in range(activity.num_speakers)]


def all_target_mask(num_frames: int) -> StnoMask:
    """Mask declaring every frame target-only (what a single-speaker input looks like)."""
    values = np.zeros((num_frames, 4), dtype=np.float64)
    values[:, 1] = 1.0
    return StnoMask(values=values, target_index=0)


def corrupt_segments(
    segments: Sequence[DiarizationSegment],
    jitter: float = 0.3,
    deletion_rate: float = 0.05,
    seed: int = 0,
) -> List[DiarizationSegment]:
    """Simulate system diarization: jitter boundaries uniformly and drop segments."""
    rng = np.random.default_rng(seed)
    corrupted: List[DiarizationSegment] = []
    for seg in segments:
        drop, start_shift, end_shift = rng.random(), rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter)
        if drop < deletion_rate:
            continue
        start = max(0.0, seg.start + start_shift)
        end = seg.end + end_shift
        if end - start < 1e-3:
            logger.debug(f"Jitter collapsed segment {seg}; dropping it")
            continue
        corrupted.append(
            DiarizationSegment(speaker=seg.speaker, start=start, end=end, recording=seg.recording)
        )
    return corrupted


def activity_to_json(activity: SpeakerActivity) -> str:
    return json.dumps(activity.to_json())
