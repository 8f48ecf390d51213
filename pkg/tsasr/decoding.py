"""
Joint CTC/attention beam search.

Hypotheses are ranked by ``lambda * log p_ctc + (1 - lambda) * log p_att``. The
CTC term is the prefix probability from the usual forward recursion over CTC
frames; timestamp tokens are invisible to it (the prefix state is kept as is
and the token adds nothing). EOS is scored with the full-sequence probability.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Collection, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch

from tsasr.config import DecodeConfig
from tsasr.exceptions import CtcStateError, DecodeWindowError, TsasrError
from tsasr.models import SegmentTranscript, StnoMask
from tsasr.network import EncoderOutput, TargetSpeakerModel
from tsasr.tokenizer import Tokenizer
from tsasr.types import ArrayLike

logger = logging.getLogger(__name__)

NEG_INF = -math.inf


@dataclass(frozen=True)
class CtcPrefixState:
    """Forward variables of one prefix.

    ``r[t, 0]`` / ``r[t, 1]`` are the log probabilities that frames 0..t emit the
    prefix ending in its last label / in blank.
    """

    r: np.ndarray
    log_psi: float
    last_label: Optional[int]
    num_labels: int

    def same_as(self, other: "CtcPrefixState") -> bool:
        return (
            self.log_psi == other.log_psi
            and self.last_label == other.last_label
            and self.num_labels == other.num_labels
            and np.array_equal(self.r, other.r)
        )


class CtcPrefixScorer:
    """Prefix scores over a fixed matrix of CTC log posteriors ``[T_c, V]``."""

    def __init__(
        self,
        log_probs: ArrayLike,
        blank: int = 0,
        eos: Optional[int] = None,
        skip_tokens: Collection[int] = (),
        ignore_tokens: Collection[int] = (),
    ):
        if isinstance(log_probs, torch.Tensor):
            log_probs = log_probs.detach().cpu().numpy()
        self.log_probs = np.asarray(log_probs, dtype=np.float64)
        if self.log_probs.ndim != 2 or self.log_probs.shape[0] < 1:
            raise ValueError(f"CTC log posteriors must be [T, V], got {self.log_probs.shape}")
        self.blank = blank
        self.eos = eos
        self.skip_tokens = frozenset(skip_tokens)
        self.ignore_tokens = frozenset(ignore_tokens)

    @classmethod
    def for_tokenizer(cls, log_probs: ArrayLike, tokenizer: Tokenizer) -> "CtcPrefixScorer":
        return cls(
            log_probs,
            blank=tokenizer.blank,
            eos=tokenizer.eos,
            skip_tokens=range(tokenizer.timestamp_begin, tokenizer.timestamp_end),
            ignore_tokens=(tokenizer.bos,),
        )

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    def initial_state(self) -> CtcPrefixState:
        r = np.full((self.num_frames, 2), NEG_INF)
        r[:, 1] = np.cumsum(self.log_probs[:, self.blank])
        return CtcPrefixState(r=r, log_psi=0.0, last_label=None, num_labels=0)

    def count_labels(self, prefix: Sequence[int]) -> int:
        return sum(
            1
            for t in prefix
            if t not in self.skip_tokens and t not in self.ignore_tokens and t != self.eos
        )

    def full_logprob(self, state: CtcPrefixState) -> float:
        """log p(the whole output equals the prefix)."""
        return float(np.logaddexp(state.r[-1, 0], state.r[-1, 1]))

    def extend_many(
        self, state: CtcPrefixState, tokens: Sequence[int]
    ) -> List[Tuple[float, CtcPrefixState]]:
        """Score several one-token extensions of the same prefix."""
        results: List[Optional[Tuple[float, CtcPrefixState]]] = [None] * len(tokens)
        label_positions: List[int] = []
        for i, token in enumerate(tokens):
            if token == self.blank:
                raise ValueError("The blank label cannot extend a prefix")
            if token in self.skip_tokens:
                results[i] = (state.log_psi, state)
            elif token == self.eos:
                results[i] = (self.full_logprob(state), state)
            else:
                label_positions.append(i)

        if label_positions:
            labels = np.asarray([tokens[i] for i in label_positions])
            x = self.log_probs
            xc = x[:, labels]
            r_sum = np.logaddexp(state.r[:, 0], state.r[:, 1])
            phi = np.repeat(r_sum[:, None], len(labels), axis=1)
            repeated = labels == state.last_label
            # a repeated label must be separated by a blank
            phi[:, repeated] = state.r[:, 1:2]

            new_label = np.full_like(xc, NEG_INF)
            new_blank = np.full_like(xc, NEG_INF)
            if state.num_labels == 0:
                new_label[0] = xc[0]
            for t in range(1, self.num_frames):
                new_label[t] = np.logaddexp(new_label[t - 1], phi[t - 1]) + xc[t]
                new_blank[t] = np.logaddexp(new_label[t - 1], new_blank[t - 1]) + x[t, self.blank]
            log_psi = np.logaddexp.reduce(
                np.concatenate([new_label[:1], phi[:-1] + xc[1:]], axis=0), axis=0
            )
            for j, i in enumerate(label_positions):
                results[i] = (
                    float(log_psi[j]),
                    CtcPrefixState(
                        r=np.stack([new_label[:, j], new_blank[:, j]], axis=1),
                        log_psi=float(log_psi[j]),
                        last_label=int(labels[j]),
                        num_labels=state.num_labels + 1,
                    ),
                )
        return [r for r in results if r is not None]

    def score(
        self, prefix: Sequence[int], state: CtcPrefixState, token: int
    ) -> Tuple[float, CtcPrefixState]:
        labels = self.count_labels(prefix)
        if labels != state.num_labels:
            raise CtcStateError(state.num_labels, labels)
        return self.extend_many(state, [token])[0]


def ctc_prefix_score(
    prefix: Sequence[int],
    next_token: int,
    log_posteriors: ArrayLike,
    state: Optional[CtcPrefixState] = None,
    tokenizer: Optional[Tokenizer] = None,
    blank: int = 0,
) -> Tuple[float, CtcPrefixState]:
    """log p_ctc(prefix + next_token is a prefix of the output), with the new state.

    Without a tokenizer every non-blank id is a CTC label. A missing state is
    only valid for a prefix holding no labels.
    """
    scorer = (
        CtcPrefixScorer.for_tokenizer(log_posteriors, tokenizer)
        if tokenizer is not None
        else CtcPrefixScorer(log_posteriors, blank=blank)
    )
    return scorer.score(prefix, state or scorer.initial_state(), next_token)


def joint_score(att_logprob: float, ctc_logprob: float, ctc_weight: float) -> float:
    score = 0.0
    if ctc_weight > 0.0:
        score += ctc_weight * ctc_logprob
    if ctc_weight < 1.0:
        score += (1.0 - ctc_weight) * att_logprob
    return score


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    att_logprob: float
    ctc_logprob: float
    ctc_state: Optional[CtcPrefixState]
    joint_score: float

    def recompute_score(self, ctc_weight: float) -> float:
        return joint_score(self.att_logprob, self.ctc_logprob, ctc_weight)

    def to_json(self, tokenizer: Optional[Tokenizer] = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "tokens": list(self.tokens),
            "score": self.joint_score,
            "att_logprob": self.att_logprob,
            "ctc_logprob": self.ctc_logprob,
        }
        if tokenizer is not None:
            data["text"] = tokenizer.decode_text(self.tokens)
        return data


@dataclass
class BeamSearchResult:
    nbest: List[Hypothesis]
    reached_eos: bool

    @property
    def best(self) -> Hypothesis:
        return self.nbest[0]


class AttentionScorer(Protocol):
    """Next-token log probabilities for a batch of equally long prefixes."""

    def reset(self) -> None: ...

    def next_logprobs(
        self, prefixes: Sequence[Sequence[int]], parents: Sequence[int]
    ) -> np.ndarray: ...


class ModelAttentionScorer:
    """Attention decoder scorer with a key/value cache that follows the beam."""

    def __init__(self, model: TargetSpeakerModel, encoder_output: EncoderOutput):
        self.model = model
        key_extension = encoder_output.key_extension
        self.memory = EncoderOutput(
            hidden=encoder_output.hidden.unsqueeze(0),
            key_extension=None if key_extension is None else key_extension.unsqueeze(0),
        )
        self.cache = model.new_cache()

    def reset(self) -> None:
        self.cache = self.model.new_cache()

    def next_logprobs(
        self, prefixes: Sequence[Sequence[int]], parents: Sequence[int]
    ) -> np.ndarray:
        with torch.inference_mode():
            if self.cache.length == 0:
                tokens = torch.tensor([list(p) for p in prefixes], dtype=torch.long)
            else:
                self.cache.reorder(torch.tensor(list(parents), dtype=torch.long))
                tokens = torch.tensor([[p[-1]] for p in prefixes], dtype=torch.long)
            logits = self.model.decode_logits(tokens, self.memory, self.cache)[:, -1]
            return torch.log_softmax(logits, dim=-1).numpy()


def joint_beam_search(
    attention: AttentionScorer,
    ctc_log_probs: Optional[ArrayLike],
    ctc_weight: float = 0.3,
    beam: int = 4,
    candidate_n: int = 40,
    max_len: int = 128,
    tokenizer: Tokenizer = Tokenizer(),
    ctc_scorer: Optional[CtcPrefixScorer] = None,
) -> BeamSearchResult:
    """Breadth-synchronous beam search over the joint CTC/attention score.

    Each live hypothesis proposes its ``candidate_n`` best attention tokens,
    the CTC prefix scorer rescores them, and the ``beam`` best candidates by
    joint score survive (ties go to the lexicographically smaller token ids).
    A hypothesis emits at most ``max_len`` tokens after BOS, EOS included.
    """
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError(f"ctc_weight must lie in [0, 1], got {ctc_weight}")
    if beam < 1 or candidate_n < 1 or max_len < 1:
        raise ValueError("beam, candidate_n and max_len must be positive")
    use_ctc = ctc_weight > 0.0
    if use_ctc and ctc_scorer is None:
        if ctc_log_probs is None:
            raise ValueError("ctc_log_probs are required when ctc_weight > 0")
        ctc_scorer = CtcPrefixScorer.for_tokenizer(ctc_log_probs, tokenizer)

    attention.reset()
    root_state = ctc_scorer.initial_state() if use_ctc and ctc_scorer is not None else None
    live = [Hypothesis((tokenizer.bos,), 0.0, 0.0, root_state, 0.0)]
    parents = [0]
    ended: List[Hypothesis] = []

    for _ in range(max_len):
        logp = attention.next_logprobs([h.tokens for h in live], parents)
        candidates: List[Tuple[int, Hypothesis]] = []
        for b, hyp in enumerate(live):
            row = np.asarray(logp[b], dtype=np.float64)
            allowed = row.copy()
            allowed[[tokenizer.bos, tokenizer.blank]] = NEG_INF
            order = np.argsort(-allowed, kind="stable")[:candidate_n]
            tokens = [int(t) for t in order if np.isfinite(allowed[t])]
            if use_ctc and ctc_scorer is not None and hyp.ctc_state is not None:
                scored = ctc_scorer.extend_many(hyp.ctc_state, tokens)
            else:
                scored = [(0.0, hyp.ctc_state)] * len(tokens)  # type: ignore[list-item]
            for token, (ctc_lp, state) in zip(tokens, scored):
                att = hyp.att_logprob + float(row[token])
                candidates.append(
                    (
                        b,
                        Hypothesis(
                            tokens=hyp.tokens + (token,),
                            att_logprob=att,
                            ctc_logprob=ctc_lp,
                            ctc_state=state,
                            joint_score=joint_score(att, ctc_lp, ctc_weight),
                        ),
                    )
                )
        candidates.sort(key=lambda bc: (-bc[1].joint_score, bc[1].tokens))

        live, parents = [], []
        for b, cand in candidates[:beam]:
            if cand.tokens[-1] == tokenizer.eos:
                ended.append(cand)
            else:
                live.append(cand)
                parents.append(b)
        if not live:
            break
        # scores never increase along a path, so a finished leader cannot be overtaken
        if ended and max(h.joint_score for h in ended) > live[0].joint_score:
            break

    def rank(hyps: List[Hypothesis]) -> List[Hypothesis]:
        return sorted(hyps, key=lambda h: (-h.joint_score, h.tokens))[:beam]

    if ended:
        return BeamSearchResult(nbest=rank(ended), reached_eos=True)
    logger.warning(f"No hypothesis reached EOS within {max_len} tokens; returning best partial")
    return BeamSearchResult(nbest=rank(live), reached_eos=False)


@dataclass
class WindowResult:
    index: int
    start: float
    end: float
    nbest: List[Hypothesis] = field(default_factory=list)
    reached_eos: bool = True
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class TargetTranscript:
    speaker: str
    session_id: str
    segments: List[SegmentTranscript] = field(default_factory=list)
    windows: List[WindowResult] = field(default_factory=list)

    @property
    def failed_windows(self) -> List[int]:
        return [w.index for w in self.windows if w.failed]

    def nbest_json(self, tokenizer: Optional[Tokenizer] = None) -> Dict[str, Any]:
        return {
            "session_id": self.session_id,
            "speaker": self.speaker,
            "windows": [
                {
                    "index": w.index,
                    "start": w.start,
                    "end": w.end,
                    "failed": w.failed,
                    "error": w.error,
                    "reached_eos": w.reached_eos,
                    "hypotheses": [h.to_json(tokenizer) for h in w.nbest],
                }
                for w in self.windows
            ],
        }


def window_bounds(num_features: int, feature_rate: float, window_seconds: float) -> List[Tuple[int, int]]:
    """Feature-frame ranges of consecutive fixed-length windows."""
    size = int(round(window_seconds * feature_rate))
    size -= size % 2
    if size <= 0:
        raise ValueError(f"window of {window_seconds}s is shorter than two feature frames")
    return [(start, min(start + size, num_features)) for start in range(0, num_features, size)]


def transcribe_recording(
    features: torch.Tensor,
    stnos: Sequence[StnoMask],
    speakers: Sequence[str],
    model: TargetSpeakerModel,
    config: DecodeConfig,
    feature_rate: float,
    session_id: str = "",
) -> Dict[str, TargetTranscript]:
    """Decode every speaker of one recording window by window.

    All speakers of a window are encoded together (co-attention couples them).
    A window that fails is recorded on each transcript and skipped.
    """
    if len(stnos) != len(speakers):
        raise ValueError(f"{len(stnos)} STNO masks for {len(speakers)} speakers")
    tokenizer = model.tokenizer
    stacked = torch.stack([torch.as_tensor(m.values) for m in stnos])
    results = {spk: TargetTranscript(speaker=spk, session_id=session_id) for spk in speakers}
    bounds = window_bounds(features.shape[-2], feature_rate, config.window_seconds)
    if len(bounds) > 1:
        logger.debug(f"Decoding {session_id} in {len(bounds)} windows")

    for index, (lo, hi) in enumerate(bounds):
        start, end = lo / feature_rate, hi / feature_rate
        try:
            with torch.inference_mode():
                window_stno = stacked[:, lo // 2 : lo // 2 + (hi - lo + 1) // 2]
                encoded = model.encode_recording(features[lo:hi], window_stno)
                ctc = model.ctc_log_probs(encoded.hidden)
        except (TsasrError, RuntimeError) as e:
            error = str(DecodeWindowError(index, str(e)))
            logger.warning(f"{session_id}: {error}")
            for transcript in results.values():
                transcript.windows.append(WindowResult(index, start, end, error=error))
            continue

        for s, speaker in enumerate(speakers):
            window = WindowResult(index, start, end)
            try:
                search = joint_beam_search(
                    ModelAttentionScorer(model, encoded.select(s)),
                    ctc[s],
                    ctc_weight=config.ctc_weight,
                    beam=config.beam,
                    candidate_n=config.candidate_n,
                    max_len=min(config.max_len, model.config.max_target_len - 1),
                    tokenizer=tokenizer,
                )
            except (TsasrError, RuntimeError) as e:
                window.error = str(DecodeWindowError(index, str(e)))
                logger.warning(f"{session_id}/{speaker}: {window.error}")
                results[speaker].windows.append(window)
                continue
            window.nbest = search.nbest
            window.reached_eos = search.reached_eos
            results[speaker].windows.append(window)
            results[speaker].segments.extend(
                tokenizer.decode_tokens(
                    search.best.tokens,
                    window_start=start,
                    window_end=end,
                    speaker=speaker,
                    session_id=session_id,
                )
            )
    return results


def transcribe_target(
    features: torch.Tensor,
    stno: StnoMask,
    model: TargetSpeakerModel,
    config: DecodeConfig,
    feature_rate: float,
    speaker: str = "target",
    session_id: str = "",
) -> TargetTranscript:
    """Transcribe the single speaker selected by ``stno``."""
    return transcribe_recording(
        features, [stno], [speaker], model, config, feature_rate, session_id
    )[speaker]


@dataclass(frozen=True)
class DecodeJob:
    session_id: str
    features: torch.Tensor
    stnos: Tuple[StnoMask, ...]
    speakers: Tuple[str, ...]


def decode_corpus(
    jobs: Sequence[DecodeJob],
    model: TargetSpeakerModel,
    config: DecodeConfig,
    feature_rate: float,
    threads: int = 1,
) -> List[Dict[str, TargetTranscript]]:
    """Decode recordings in parallel; results keep the order of ``jobs``."""
    model.eval()

    def run(job: DecodeJob) -> Dict[str, TargetTranscript]:
        return transcribe_recording(
            job.features, job.stnos, job.speakers, model, config, feature_rate, job.session_id
        )

    if threads <= 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, jobs))


def write_hypotheses(
    decoded: Sequence[Dict[str, TargetTranscript]], tokenizer: Optional[Tokenizer] = None
) -> Tuple[str, str]:
    """Serialise decoded recordings to (segments JSON, n-best JSON)."""
    segments = [
        seg.to_json()
        for recording in decoded
        for transcript in recording.values()
        for seg in transcript.segments
    ]
    nbest = [t.nbest_json(tokenizer) for recording in decoded for t in recording.values()]
    return json.dumps(segments, indent=2), json.dumps(nbest, indent=2)
