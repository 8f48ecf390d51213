"""
Deterministic synthetic multi-speaker corpus.

Each recording is a sequence of turns. A turn renders its text character by
character: every character owns ``char_frames`` feature frames carrying a
per-character pattern plus the speaker's channel signature. Overlapping turns
are summed, and a low-level background noise covers the whole recording.

Turn onsets and lengths are even feature-frame counts, so the ground-truth
diarization rasterized at the encoder rate (half the feature rate) matches the
generator's own per-frame speaker counts exactly.
"""

import json
import logging
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from tsasr.checkpoint import load_tensors, save_tensors
from tsasr.config import SynthConfig
from tsasr.diarization import (
    activity_matrix,
    corrupt_segments,
    group_by_recording,
    parse_rttm,
    stno_mask,
    stno_masks,
    write_rttm,
)
from tsasr.exceptions import ConfigError, UnknownSpeakerError
from tsasr.models import DiarizationSegment, SegmentTranscript, SpeakerActivity, StnoMask
from tsasr.tokenizer import WINDOW_SECONDS
from tsasr.utils import DTYPE

logger = logging.getLogger(__name__)

MAX_LAYOUT_ATTEMPTS = 100
# stream offsets keeping the derived seed families apart
_SIGNATURE_STREAM = 1_000_000
_PATTERN_STREAM = 2_000_000
_WORDS_STREAM = 3_000_000
_CORRUPTION_STREAM = 4_000_000


@dataclass(frozen=True)
class Turn:
    speaker: str
    onset: int  # feature frames
    words: Tuple[str, ...]
    char_frames: int

    @property
    def text(self) -> str:
        return " ".join(self.words)

    @property
    def length(self) -> int:
        return len(self.text) * self.char_frames

    @property
    def offset(self) -> int:
        return self.onset + self.length


@dataclass
class SynthRecording:
    recording_id: str
    speakers: Tuple[str, ...]
    features: torch.Tensor  # [T, F]
    segments: List[DiarizationSegment]
    transcripts: List[SegmentTranscript]
    feature_rate: float
    contributions: Optional[np.ndarray] = None  # [S, T, F]
    background: Optional[np.ndarray] = None  # [T, F]
    speaker_counts: Optional[np.ndarray] = None  # active speakers per encoder frame

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def duration(self) -> float:
        return self.num_frames / self.feature_rate

    @property
    def encoder_rate(self) -> float:
        return self.feature_rate / 2


@dataclass(frozen=True)
class CorpusStats:
    """Share of encoder frames with 0, 1 and 2+ active speakers."""

    frames: int
    silence: float
    single: float
    overlap: float
    span_overlap: float  # overlapped share of first-onset..last-offset

    @classmethod
    def from_counts(cls, counts: Sequence[np.ndarray]) -> "CorpusStats":
        total = sum(len(c) for c in counts)
        spans = [c[np.flatnonzero(c)[0] : np.flatnonzero(c)[-1] + 1] for c in counts if np.any(c)]
        span_total = sum(len(s) for s in spans)
        if total == 0:
            return cls(frames=0, silence=0.0, single=0.0, overlap=0.0, span_overlap=0.0)
        return cls(
            frames=total,
            silence=sum(int(np.sum(c == 0)) for c in counts) / total,
            single=sum(int(np.sum(c == 1)) for c in counts) / total,
            overlap=sum(int(np.sum(c >= 2)) for c in counts) / total,
            span_overlap=(sum(int(np.sum(s >= 2)) for s in spans) / span_total) if span_total else 0.0,
        )

    def to_json(self) -> Dict[str, Any]:
        return {
            "frames": self.frames,
            "silence": self.silence,
            "single": self.single,
            "overlap": self.overlap,
            "span_overlap": self.span_overlap,
        }


@dataclass
class SynthCorpus:
    train: List[SynthRecording]
    dev: List[SynthRecording]
    corrupted: Dict[str, List[DiarizationSegment]] = field(default_factory=dict)

    def stats(self) -> Dict[str, CorpusStats]:
        return {
            "train": corpus_stats(self.train),
            "dev": corpus_stats(self.dev),
        }


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def speaker_signature(speaker_index: int, feature_dim: int, seed: int) -> np.ndarray:
    return _rng(seed, _SIGNATURE_STREAM + speaker_index).normal(0.0, 1.0, feature_dim)


def character_patterns(feature_dim: int, char_frames: int, seed: int) -> Dict[str, np.ndarray]:
    """A ``[char_frames, F]`` pattern for space and every lowercase letter."""
    alphabet = " " + string.ascii_lowercase
    return {
        c: _rng(seed, _PATTERN_STREAM + i).normal(0.0, 1.0, (char_frames, feature_dim))
        for i, c in enumerate(alphabet)
    }


def word_list(size: int, seed: int, min_length: int = 2, max_length: int = 5) -> List[str]:
    rng = _rng(seed, _WORDS_STREAM)
    words: List[str] = []
    letters = list(string.ascii_lowercase)
    while len(words) < size:
        length = int(rng.integers(min_length, max_length + 1))
        word = "".join(rng.choice(letters, size=length))
        if word not in words:
            words.append(word)
    return words


def _turn_order(speakers: Sequence[str], turns: int, rng: np.random.Generator) -> List[str]:
    """Round-robin turn owners, never giving one speaker two turns in a row."""
    order: List[str] = []
    for _ in range(turns):
        round_ = [speakers[i] for i in rng.permutation(len(speakers))]
        if order and len(round_) > 1 and round_[0] == order[-1]:
            round_[0], round_[1] = round_[1], round_[0]
        order.extend(round_)
    return order


def _even(x: float) -> int:
    return 2 * int(round(x / 2))


def _overlaps(lengths: Sequence[int], overlap: float) -> Optional[List[int]]:
    """Even overlaps between consecutive turns hitting the target span fraction.

    Returns None when the lengths cannot realise the target without a turn
    overlapping two neighbours at once.
    """
    shorter = [min(a, b) for a, b in zip(lengths, lengths[1:])]
    if not shorter:
        return []
    ratio = overlap * sum(lengths) / ((1.0 + overlap) * sum(shorter))
    if ratio > 1.0:
        return None
    values = [_even(ratio * m) for m in shorter]
    for i, d in enumerate(lengths):
        before = values[i - 1] if i > 0 else 0
        after = values[i] if i < len(values) else 0
        if before + after > d:
            return None
    return values


def _layout(
    config: SynthConfig, owners: Sequence[str], vocabulary: Sequence[str], rng: np.random.Generator
) -> Tuple[List[Turn], int]:
    max_frames = int(WINDOW_SECONDS * config.frame_rate)
    max_gap = config.max_gap_chars * config.char_frames
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        words = [
            tuple(rng.choice(vocabulary, size=int(rng.integers(config.min_words, config.max_words + 1))))
            for _ in owners
        ]
        lengths = [len(" ".join(w)) * config.char_frames for w in words]
        if config.overlap > 0:
            overlaps = _overlaps(lengths, config.overlap)
            if overlaps is None:
                continue
            steps = [-o for o in overlaps]
        else:
            steps = [2 * int(rng.integers(1, max_gap // 2 + 1)) for _ in lengths[1:]]
        lead, trail = (2 * int(rng.integers(1, max_gap // 2 + 1)) for _ in range(2))
        turns = []
        onset = lead
        for i, (owner, w) in enumerate(zip(owners, words)):
            turn = Turn(speaker=owner, onset=onset, words=tuple(str(x) for x in w), char_frames=config.char_frames)
            turns.append(turn)
            if i < len(steps):
                onset = turn.offset + steps[i]
        total = max(t.offset for t in turns) + trail
        if total <= max_frames:
            return turns, total
    raise ConfigError(
        "data.overlap",
        f"could not lay out turns for overlap {config.overlap} within {WINDOW_SECONDS:g} s "
        f"after {MAX_LAYOUT_ATTEMPTS} attempts; shorten utterances or lower the overlap",
    )


def _word_times(turn: Turn, rate: float) -> Tuple[Tuple[float, float], ...]:
    times = []
    cursor = turn.onset
    for word in turn.words:
        end = cursor + len(word) * turn.char_frames
        times.append((cursor / rate, end / rate))
        cursor = end + turn.char_frames  # the space
    return tuple(times)


def synth_recording(config: SynthConfig, index: int, vocabulary: Optional[Sequence[str]] = None) -> SynthRecording:
    """Generate recording ``index``; identical for a given seed and index."""
    rng = _rng(config.seed, index)
    vocabulary = list(vocabulary) if vocabulary is not None else word_list(config.vocabulary_size, config.seed)
    recording_id = f"rec{index:05d}"
    num_speakers = int(rng.integers(config.min_speakers, config.max_speakers + 1))
    pool = sorted(int(i) for i in rng.choice(config.speaker_pool, size=num_speakers, replace=False))
    speakers = tuple(f"spk{i:02d}" for i in pool)

    owners = _turn_order(speakers, config.turns_per_speaker, rng)
    turns, num_frames = _layout(config, owners, vocabulary, rng)

    rate = config.frame_rate
    patterns = character_patterns(config.feature_dim, config.char_frames, config.seed)
    contributions = np.zeros((num_speakers, num_frames, config.feature_dim))
    for turn in turns:
        s = speakers.index(turn.speaker)
        signature = speaker_signature(pool[s], config.feature_dim, config.seed)
        rendered = np.concatenate([patterns[c] for c in turn.text.lower()]) + signature
        rendered += config.noise_std * rng.normal(size=rendered.shape)
        contributions[s, turn.onset : turn.offset] += rendered
    background = config.silence_std * rng.normal(size=(num_frames, config.feature_dim))
    features = np.sum(contributions, axis=0) + background

    counts = np.zeros(num_frames // 2, dtype=np.int64)
    for turn in turns:
        counts[turn.onset // 2 : turn.offset // 2] += 1

    segments = [
        DiarizationSegment(turn.speaker, turn.onset / rate, turn.offset / rate, recording_id)
        for turn in turns
    ]
    transcripts = [
        SegmentTranscript(
            speaker=turn.speaker,
            start=turn.onset / rate,
            end=turn.offset / rate,
            words=turn.words,
            word_times=_word_times(turn, rate),
            session_id=recording_id,
        )
        for turn in turns
    ]
    return SynthRecording(
        recording_id=recording_id,
        speakers=speakers,
        features=torch.from_numpy(features).to(DTYPE),
        segments=segments,
        transcripts=transcripts,
        feature_rate=rate,
        contributions=contributions,
        background=background,
        speaker_counts=counts,
    )


def reference_activity(recording: SynthRecording, duration: Optional[float] = None) -> SpeakerActivity:
    """Ground-truth D at the encoder rate, optionally padded with silence."""
    return activity_matrix(
        recording.segments,
        recording.encoder_rate,
        duration=duration if duration is not None else recording.duration,
        speakers=recording.speakers,
    )


def reference_stnos(recording: SynthRecording, duration: Optional[float] = None) -> List[StnoMask]:
    return stno_masks(reference_activity(recording, duration))


def rasterize_reference(
    recording: SynthRecording, speaker: str, frame_rate: Optional[float] = None
) -> StnoMask:
    """Ground-truth STNO mask of one speaker (encoder rate by default)."""
    if speaker not in recording.speakers:
        raise UnknownSpeakerError(speaker, recording.speakers)
    activity = activity_matrix(
        recording.segments,
        frame_rate or recording.encoder_rate,
        duration=recording.duration,
        speakers=recording.speakers,
    )
    return stno_mask(activity, recording.speakers.index(speaker))


def corpus_stats(recordings: Sequence[SynthRecording]) -> CorpusStats:
    """Speaker-count shares measured on the rasterized ground truth."""
    return CorpusStats.from_counts(
        [reference_activity(r).values.sum(axis=0).round().astype(np.int64) for r in recordings]
    )


def synth_corpus(config: SynthConfig, threads: int = 1) -> SynthCorpus:
    """Generate train and dev recordings; output does not depend on ``threads``."""
    vocabulary = word_list(config.vocabulary_size, config.seed)
    total = config.num_recordings + config.dev_recordings

    def generate(index: int) -> SynthRecording:
        return synth_recording(config, index, vocabulary)

    if threads <= 1:
        recordings = [generate(i) for i in range(total)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            recordings = list(pool.map(generate, range(total)))

    corrupted = {
        rec.recording_id: corrupt_segments(
            rec.segments,
            config.corrupt_jitter,
            config.corrupt_deletion,
            seed=config.seed * _CORRUPTION_STREAM + i,
        )
        for i, rec in enumerate(recordings)
    }
    corpus = SynthCorpus(
        train=recordings[: config.num_recordings],
        dev=recordings[config.num_recordings :],
        corrupted=corrupted,
    )
    for split, stats in corpus.stats().items():
        logger.info(
            f"{split}: {stats.frames} frames, {stats.silence:.1%} silence, "
            f"{stats.single:.1%} single speaker, {stats.overlap:.1%} overlap"
        )
    return corpus


def save_recordings(
    recordings: Sequence[SynthRecording],
    directory: str | Path,
    corrupted: Optional[Dict[str, List[DiarizationSegment]]] = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensors(
        directory / "features.pt",
        {r.recording_id: r.features for r in recordings},
        metadata={
            "feature_rate": recordings[0].feature_rate if recordings else 0.0,
            "speakers": {r.recording_id: list(r.speakers) for r in recordings},
        },
    )
    transcripts = [seg.to_json() for r in recordings for seg in r.transcripts]
    (directory / "transcripts.json").write_text(json.dumps(transcripts, indent=2), encoding="utf-8")
    (directory / "reference.rttm").write_text(
        write_rttm([s for r in recordings for s in r.segments]), encoding="utf-8"
    )
    if corrupted is not None:
        (directory / "corrupted.rttm").write_text(
            write_rttm([s for r in recordings for s in corrupted.get(r.recording_id, [])]),
            encoding="utf-8",
        )
    (directory / "stats.json").write_text(
        json.dumps(corpus_stats(recordings).to_json(), indent=2), encoding="utf-8"
    )


def save_corpus(corpus: SynthCorpus, directory: str | Path) -> None:
    for split, recordings in (("train", corpus.train), ("dev", corpus.dev)):
        save_recordings(recordings, Path(directory) / split, corpus.corrupted)
    logger.info(f"Wrote corpus to {directory}")


def load_recordings(directory: str | Path) -> List[SynthRecording]:
    """Read one split written by ``save_recordings`` (without mixing internals)."""
    directory = Path(directory)
    tensors, metadata = load_tensors(directory / "features.pt")
    segments = group_by_recording(parse_rttm((directory / "reference.rttm").read_text(encoding="utf-8")))
    transcripts: Dict[str, List[SegmentTranscript]] = {}
    for item in json.loads((directory / "transcripts.json").read_text(encoding="utf-8")):
        seg = SegmentTranscript.from_json(item)
        transcripts.setdefault(seg.session_id, []).append(seg)
    rate = float(metadata["feature_rate"])
    return [
        SynthRecording(
            recording_id=rec_id,
            speakers=tuple(metadata["speakers"][rec_id]),
            features=features.to(DTYPE),
            segments=segments.get(rec_id, []),
            transcripts=transcripts.get(rec_id, []),
            feature_rate=rate,
        )
        for rec_id, features in sorted(tensors.items())
    ]
