import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

from tsasr.config import MetricsConfig
from tsasr.diarization import group_by_recording, parse_rttm
from tsasr.metrics.der import DerResult, der
from tsasr.metrics.permutation import TranscriptsBySpeaker, cp_wer, orc_wer, tc_orc_wer, tcp_wer
from tsasr.metrics.wer import concatenate, wer
from tsasr.models import SegmentTranscript, WerCounts

logger = logging.getLogger(__name__)

WER_METRICS = ("wer", "cpwer", "tcpwer", "orcwer", "tcorcwer")

Scorer = Callable[[TranscriptsBySpeaker, TranscriptsBySpeaker, MetricsConfig], WerCounts]


def _plain_wer(refs: TranscriptsBySpeaker, hyps: TranscriptsBySpeaker, config: MetricsConfig) -> WerCounts:
    """Speaker-agnostic WER of the time-ordered concatenations."""
    flatten = lambda by_speaker: [s for segs in by_speaker.values() for s in segs]  # noqa: E731
    return wer(
        concatenate(flatten(refs), normalize=config.normalize).words,
        concatenate(flatten(hyps), normalize=config.normalize).words,
    )


SCORERS: Dict[str, Scorer] = {
    "wer": _plain_wer,
    "cpwer": lambda r, h, c: cp_wer(r, h, c.normalize).counts,
    "tcpwer": lambda r, h, c: tcp_wer(r, h, c.collar, c.interpolate_word_times, c.normalize).counts,
    "orcwer": lambda r, h, c: orc_wer(r, h, c.normalize).counts,
    "tcorcwer": lambda r, h, c: tc_orc_wer(
        r, h, c.collar, c.interpolate_word_times, c.normalize
    ).counts,
}


def load_transcripts(path: str | Path) -> List[SegmentTranscript]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a JSON array of segments")
    return [SegmentTranscript.from_json(item) for item in data]


def by_session(segments: Sequence[SegmentTranscript]) -> Dict[str, Dict[str, List[SegmentTranscript]]]:
    sessions: Dict[str, Dict[str, List[SegmentTranscript]]] = defaultdict(lambda: defaultdict(list))
    for seg in segments:
        sessions[seg.session_id][seg.speaker].append(seg)
    return {sid: dict(speakers) for sid, speakers in sessions.items()}


def score_sessions(
    references: Sequence[SegmentTranscript],
    hypotheses: Sequence[SegmentTranscript],
    config: Optional[MetricsConfig] = None,
    metrics: Sequence[str] = WER_METRICS,
) -> Dict[str, Any]:
    """Per-session counts plus aggregates summed over sessions."""
    config = config or MetricsConfig()
    unknown = [m for m in metrics if m not in SCORERS]
    if unknown:
        raise ValueError(f"Unknown metrics {unknown}; choose from {list(SCORERS)}")
    refs, hyps = by_session(references), by_session(hypotheses)
    for sid in sorted(set(hyps) - set(refs)):
        logger.warning(f"Hypothesis session '{sid}' has no reference; scored against silence")

    report: Dict[str, Any] = {"sessions": {}, "aggregate": {}}
    totals = {m: WerCounts() for m in metrics}
    for sid in sorted(set(refs) | set(hyps)):
        session = {}
        for metric in metrics:
            counts = SCORERS[metric](refs.get(sid, {}), hyps.get(sid, {}), config)
            totals[metric] = totals[metric] + counts
            session[metric] = counts.to_json()
        report["sessions"][sid] = session
    report["aggregate"] = {m: c.to_json() for m, c in totals.items()}
    return report


def score_files(
    reference_path: str | Path,
    hypothesis_path: str | Path,
    config: Optional[MetricsConfig] = None,
    metrics: Sequence[str] = WER_METRICS,
) -> Dict[str, Any]:
    return score_sessions(
        load_transcripts(reference_path), load_transcripts(hypothesis_path), config, metrics
    )


def score_der_files(
    reference_rttm: str | Path, hypothesis_rttm: str | Path, collar: float = 0.0
) -> Dict[str, Any]:
    reference = group_by_recording(parse_rttm(Path(reference_rttm).read_text(encoding="utf-8")))
    hypothesis = group_by_recording(parse_rttm(Path(hypothesis_rttm).read_text(encoding="utf-8")))
    sessions: Dict[str, Any] = {}
    total = DerResult(miss=0.0, false_alarm=0.0, confusion=0.0, total=0.0)
    for sid in sorted(set(reference) | set(hypothesis)):
        result = der(reference.get(sid, []), hypothesis.get(sid, []), collar)
        sessions[sid] = result.to_json()
        total = total + result
    return {"sessions": sessions, "aggregate": {"der": total.to_json()}}


def format_rates(report: Mapping[str, Any]) -> str:
    """One line per aggregate metric, rates as percentages with 4 significant digits."""
    lines = []
    for metric, values in report["aggregate"].items():
        rate = values.get("rate", values.get("der"))
        lines.append(f"{metric}: {rate * 100:.4g}%")
    return "\n".join(lines)
