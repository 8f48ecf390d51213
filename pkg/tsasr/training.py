"""
Losses and the phased training schedule.

Phases decide which parameter groups train:

    ctc_preheat   ctc
    fddt_preheat  ctc, fddt (fddt at ``fddt_lr_multiplier`` times the base rate)
    full          everything

Progress is published as ``TrainingEvent`` records on a ``BroadcastChannel``.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from tsasr.checkpoint import CheckpointManager
from tsasr.config import DecodeConfig, RunConfig, TrainConfig
from tsasr.decoding import DecodeJob, decode_corpus
from tsasr.diarization import binarize, stno_masks
from tsasr.events import BroadcastChannel
from tsasr.exceptions import EmptyInputError, InfeasibleLabelError, TrainingDivergedError
from tsasr.metrics.permutation import tcp_wer
from tsasr.models import SegmentTranscript, TrainingEvent, TrainingPhase, WerCounts, sum_counts
from tsasr.network import EncoderOutput, TargetSpeakerModel
from tsasr.synthdata import SynthRecording, reference_activity, reference_stnos
from tsasr.tokenizer import Tokenizer
from tsasr.utils import DTYPE, as_tensor

logger = logging.getLogger(__name__)

PHASE_GROUPS: Dict[TrainingPhase, Tuple[str, ...]] = {
    "ctc_preheat": ("ctc",),
    "fddt_preheat": ("ctc", "fddt"),
    "full": ("ctc", "fddt", "base"),
}


def required_frames(labels: Sequence[int]) -> int:
    """Frames CTC needs for ``labels``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(log_probs: torch.Tensor, labels: Sequence[int], blank: int = 0) -> torch.Tensor:
    """Negative log-likelihood of ``labels`` summed over all CTC alignments.

    Args:
        log_probs: ``[T_c, V]`` per-frame log posteriors
        labels: Label ids (no blanks)

    Raises:
        InfeasibleLabelError: when T_c frames cannot hold the label
    """
    frames = log_probs.shape[-2]
    needed = required_frames(labels)
    if needed > frames:
        raise InfeasibleLabelError(len(labels), needed, frames)
    return F.ctc_loss(
        log_probs.unsqueeze(1),
        torch.tensor(list(labels), dtype=torch.long),
        input_lengths=torch.tensor([frames]),
        target_lengths=torch.tensor([len(labels)]),
        blank=blank,
        reduction="sum",
        zero_infinity=False,
    )


@dataclass(frozen=True)
class LabelVariant:
    """One acceptable labelling of a target stream (e.g. one casing)."""

    decoder_tokens: Tuple[int, ...]
    ctc_labels: Tuple[int, ...]


@dataclass
class TrainingBatch:
    features: torch.Tensor  # [B, T, F]
    stnos: torch.Tensor  # [B, S, T', 4]
    variants: List[List[LabelVariant]]  # B * S entries, recording-major

    @property
    def num_streams(self) -> int:
        return len(self.variants)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    attention: float
    ctc: float
    chosen_variants: List[int] = field(default_factory=list)


def label_variants(
    segments: Sequence[SegmentTranscript], tokenizer: Tokenizer, case_variants: bool = False
) -> List[LabelVariant]:
    """Decoder and CTC targets for one speaker's segments, one per casing."""
    ordered = sorted(segments, key=lambda s: s.start)
    casings = [str.lower, str.upper] if case_variants else [lambda w: w]
    variants: List[LabelVariant] = []
    for case in casings:
        cased = [replace(s, words=tuple(case(w) for w in s.words)) for s in ordered]
        variant = LabelVariant(
            decoder_tokens=tuple(tokenizer.encode_segments(cased)),
            ctc_labels=tuple(tokenizer.ctc_labels(" ".join(" ".join(s.words) for s in cased))),
        )
        if variant not in variants:
            variants.append(variant)
    return variants


def batch_from_recordings(
    recordings: Sequence[SynthRecording],
    tokenizer: Tokenizer,
    case_variants: bool = False,
    hard_masks: bool = True,
) -> TrainingBatch:
    """Stack recordings with equal speaker counts, appending trailing silence."""
    if not recordings:
        raise EmptyInputError("Cannot build a batch from zero recordings")
    speakers = {len(r.speakers) for r in recordings}
    if len(speakers) != 1:
        raise ValueError(f"Batch mixes speaker counts {sorted(speakers)}")
    num_features = max(r.num_frames for r in recordings)
    num_features += num_features % 2
    feature_rate = recordings[0].feature_rate
    duration = num_features / feature_rate

    features = torch.zeros(len(recordings), num_features, recordings[0].features.shape[-1], dtype=DTYPE)
    stnos = []
    variants: List[List[LabelVariant]] = []
    for i, rec in enumerate(recordings):
        features[i, : rec.num_frames] = rec.features
        activity = reference_activity(rec, duration=duration)
        if hard_masks:
            activity = binarize(activity)
        stnos.append(torch.stack([as_tensor(m) for m in stno_masks(activity)]))
        for speaker in rec.speakers:
            segments = [s for s in rec.transcripts if s.speaker == speaker]
            variants.append(label_variants(segments, tokenizer, case_variants))
    return TrainingBatch(features=features, stnos=torch.stack(stnos), variants=variants)


def combined_loss(
    batch: TrainingBatch, model: TargetSpeakerModel, ctc_weight: float = 0.3
) -> LossBreakdown:
    """Mean over target streams of (1 - w) * min_variant CE + w * CTC.

    The CTC term uses the labels of the variant the decoder liked best. A
    stream whose CTC label cannot fit the frames contributes no CTC term.
    """
    if any(not v for v in batch.variants):
        raise EmptyInputError("Every target stream needs at least one label variant")
    tokenizer = model.tokenizer
    encoded = model.encode_recording(batch.features, batch.stnos)
    hidden = encoded.hidden.flatten(0, 1)
    extension = None if encoded.key_extension is None else encoded.key_extension.flatten(0, 1)
    if hidden.shape[0] != batch.num_streams:
        raise ValueError(f"{hidden.shape[0]} encoded streams for {batch.num_streams} targets")

    rows = [(n, tokens.decoder_tokens) for n, vs in enumerate(batch.variants) for tokens in vs]
    owner = torch.tensor([n for n, _ in rows])
    length = max(len(t) for _, t in rows)
    padded = torch.full((len(rows), length), tokenizer.eos, dtype=torch.long)
    valid = torch.zeros(len(rows), length - 1, dtype=DTYPE)
    for i, (_, tokens) in enumerate(rows):
        padded[i, : len(tokens)] = torch.tensor(tokens)
        valid[i, : len(tokens) - 1] = 1.0
    memory = EncoderOutput(
        hidden=hidden.index_select(0, owner),
        key_extension=None if extension is None else extension.index_select(0, owner),
    )
    logits = model.decode_logits(padded[:, :-1], memory)
    token_ce = F.cross_entropy(logits.transpose(1, 2), padded[:, 1:], reduction="none")
    row_ce = (token_ce * valid).sum(dim=1)

    ctc_log_probs = model.ctc_log_probs(hidden)
    losses = []
    chosen: List[int] = []
    att_total, ctc_total = 0.0, 0.0
    offset = 0
    for n, vs in enumerate(batch.variants):
        ce = row_ce[offset : offset + len(vs)]
        offset += len(vs)
        best = int(torch.argmin(ce.detach()).item())
        chosen.append(best)
        att = ce[best]
        try:
            ctc = ctc_loss(ctc_log_probs[n], vs[best].ctc_labels, blank=tokenizer.blank)
        except InfeasibleLabelError as e:
            logger.warning(f"Skipping CTC term of stream {n}: {e}")
            ctc = torch.zeros((), dtype=DTYPE)
        losses.append((1.0 - ctc_weight) * att + ctc_weight * ctc)
        att_total += float(att.detach())
        ctc_total += float(ctc.detach())
    count = len(losses)
    return LossBreakdown(
        total=torch.stack(losses).mean(),
        attention=att_total / count,
        ctc=ctc_total / count,
        chosen_variants=chosen,
    )


def set_trainable(model: TargetSpeakerModel, phase: TrainingPhase) -> Dict[str, List[torch.nn.Parameter]]:
    """Freeze every group the phase does not train; return the trainable ones."""
    trainable: Dict[str, List[torch.nn.Parameter]] = {}
    for group, params in model.parameter_groups().items():
        active = group in PHASE_GROUPS[phase]
        for _, param in params:
            param.requires_grad_(active)
        if active and params:
            trainable[group] = [p for _, p in params]
    return trainable


def linear_schedule(warmup_steps: int, max_steps: int):
    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        remaining = max_steps - step
        return max(0.0, remaining / max(1, max_steps - warmup_steps))

    return factor


def build_optimizer(
    model: TargetSpeakerModel, phase: TrainingPhase, config: TrainConfig
) -> Tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LambdaLR]:
    groups = []
    for name, params in set_trainable(model, phase).items():
        lr = config.peak_lr
        if name == "fddt" and phase == "fddt_preheat":
            lr *= config.fddt_lr_multiplier
        groups.append({"params": params, "lr": lr, "name": name})
    if not groups:
        raise EmptyInputError(f"Phase {phase} has no parameters to train")
    optimizer = torch.optim.AdamW(groups, lr=config.peak_lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, linear_schedule(config.warmup_steps, config.max_steps)
    )
    return optimizer, scheduler


def make_batches(
    recordings: Sequence[SynthRecording],
    batch_size: int,
    generator: Optional[torch.Generator] = None,
) -> List[List[SynthRecording]]:
    """Shuffle (when a generator is given) and chunk recordings of equal speaker count."""
    order = (
        torch.randperm(len(recordings), generator=generator).tolist()
        if generator is not None
        else list(range(len(recordings)))
    )
    by_speakers: Dict[int, List[SynthRecording]] = {}
    for i in order:
        by_speakers.setdefault(len(recordings[i].speakers), []).append(recordings[i])
    batches = []
    for count in sorted(by_speakers):
        group = by_speakers[count]
        batches.extend(group[i : i + batch_size] for i in range(0, len(group), batch_size))
    return batches


def dev_loss(
    model: TargetSpeakerModel,
    recordings: Sequence[SynthRecording],
    ctc_weight: float = 0.3,
    batch_size: int = 8,
    case_variants: bool = False,
) -> float:
    """Stream-weighted mean combined loss over a held-out set."""
    was_training = model.training
    model.eval()
    total, streams = 0.0, 0
    with torch.no_grad():
        for chunk in make_batches(recordings, batch_size):
            batch = batch_from_recordings(chunk, model.tokenizer, case_variants)
            total += float(combined_loss(batch, model, ctc_weight).total) * batch.num_streams
            streams += batch.num_streams
    model.train(was_training)
    return total / max(streams, 1)


def dev_tcp_wer(
    model: TargetSpeakerModel,
    recordings: Sequence[SynthRecording],
    decode_config: DecodeConfig,
    collar: float,
    threads: int = 1,
) -> WerCounts:
    """Decode with oracle diarization and score tcpWER with summed counts."""
    jobs = [
        DecodeJob(
            session_id=rec.recording_id,
            features=rec.features,
            stnos=tuple(reference_stnos(rec)),
            speakers=rec.speakers,
        )
        for rec in recordings
    ]
    was_training = model.training
    decoded = decode_corpus(jobs, model, decode_config, recordings[0].feature_rate, threads)
    model.train(was_training)
    counts = []
    for rec, result in zip(recordings, decoded):
        hyps = {spk: t.segments for spk, t in result.items()}
        refs = {spk: [s for s in rec.transcripts if s.speaker == spk] for spk in rec.speakers}
        counts.append(tcp_wer(refs, hyps, collar).counts)
    return sum_counts(counts)


@dataclass
class PhaseResult:
    phase: TrainingPhase
    steps: int
    best_metric: float
    best_checkpoint: Optional[str]
    history: List[TrainingEvent] = field(default_factory=list)


class Trainer:
    """Runs training phases over an in-memory corpus."""

    def __init__(
        self,
        model: TargetSpeakerModel,
        train_set: Sequence[SynthRecording],
        dev_set: Sequence[SynthRecording],
        config: RunConfig,
        checkpoints: CheckpointManager,
        channel: Optional[BroadcastChannel] = None,
        seed: int = 0,
        threads: int = 1,
    ):
        if not train_set:
            raise EmptyInputError("Training set is empty")
        self.model = model
        self.train_set = list(train_set)
        self.dev_set = list(dev_set)
        self.config = config
        self.checkpoints = checkpoints
        self.channel = channel or BroadcastChannel()
        self.seed = seed
        self.threads = threads

    @property
    def train_config(self) -> TrainConfig:
        return self.config.train

    def _publish(self, event: TrainingEvent) -> None:
        self.channel.publish(event)

    def _batches(self) -> Iterator[List[SynthRecording]]:
        epoch = 0
        while True:
            generator = torch.Generator()
            generator.manual_seed(self.seed * 1_000_003 + epoch)
            yield from make_batches(self.train_set, self.train_config.batch_size, generator)
            epoch += 1

    def evaluate(self) -> Dict[str, float]:
        cfg = self.train_config
        values = {
            "dev_loss": dev_loss(
                self.model,
                self.dev_set,
                cfg.ctc_weight,
                cfg.batch_size,
                self.config.data.case_variants,
            )
        }
        if cfg.eval_metric == "tcpwer":
            decode_config = self.config.decode.model_copy(update={"beam": cfg.dev_beam})
            counts = dev_tcp_wer(self.model, self.dev_set, decode_config, cfg.dev_collar, self.threads)
            values["dev_tcpwer"] = counts.rate
        return values

    def run_phase(self, phase: TrainingPhase) -> PhaseResult:
        cfg = self.train_config
        model = self.model
        model.train()
        optimizer, scheduler = build_optimizer(model, phase, cfg)
        steps_per_epoch = len(make_batches(self.train_set, cfg.batch_size))
        eval_every = min(steps_per_epoch, cfg.eval_interval)
        metric_key = "dev_tcpwer" if cfg.eval_metric == "tcpwer" else "dev_loss"
        checkpoint_name = f"{phase}-best.pt"

        result = PhaseResult(phase=phase, steps=0, best_metric=math.inf, best_checkpoint=None)
        start = TrainingEvent(event="phase_start", phase=phase, step=0, values={"eval_every": eval_every})
        result.history.append(start)
        self._publish(start)
        logger.info(f"Starting phase {phase}: evaluating every {eval_every} steps")

        stale = 0
        batches = self._batches()
        for step in range(1, cfg.max_steps + 1):
            batch = batch_from_recordings(
                next(batches),
                model.tokenizer,
                self.config.data.case_variants,
                self.config.conditioning.hard_masks,
            )
            loss = combined_loss(batch, model, cfg.ctc_weight)
            if not torch.isfinite(loss.total):
                logger.error(f"Loss became {float(loss.total)} at step {step} of {phase}")
                raise TrainingDivergedError(step, result.best_checkpoint)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            scheduler.step()
            result.steps = step
            event = TrainingEvent(
                event="step",
                phase=phase,
                step=step,
                values={
                    "loss": float(loss.total.detach()),
                    "attention_loss": loss.attention,
                    "ctc_loss": loss.ctc,
                    "lr": scheduler.get_last_lr()[0],
                },
            )
            self._publish(event)
            logger.debug(str(event))

            if step % eval_every and step != cfg.max_steps:
                continue
            if not self.dev_set:
                continue
            values = self.evaluate()
            model.train()
            evaluation = TrainingEvent(event="eval", phase=phase, step=step, values=values)
            result.history.append(evaluation)
            self._publish(evaluation)
            if values[metric_key] < result.best_metric:
                result.best_metric = values[metric_key]
                result.best_checkpoint = str(
                    self.checkpoints.save_model(
                        checkpoint_name, model, {"phase": phase, "step": step, **values}
                    )
                )
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    stop = TrainingEvent(event="early_stop", phase=phase, step=step, values=values)
                    result.history.append(stop)
                    self._publish(stop)
                    logger.info(f"Early stopping {phase} at step {step}")
                    break

        if result.best_checkpoint is not None:
            self.checkpoints.load_model(checkpoint_name, model)
        end = TrainingEvent(
            event="phase_end", phase=phase, step=result.steps, values={"best": result.best_metric}
        )
        result.history.append(end)
        self._publish(end)
        logger.info(f"Finished phase {phase} after {result.steps} steps (best {metric_key} {result.best_metric:.4g})")
        return result

    def run(self) -> List[PhaseResult]:
        return [self.run_phase(phase) for phase in self.train_config.phases]


def run_phase(
    train_set: Sequence[SynthRecording],
    dev_set: Sequence[SynthRecording],
    model: TargetSpeakerModel,
    config: RunConfig,
    phase: TrainingPhase,
    checkpoints: CheckpointManager,
    channel: Optional[BroadcastChannel] = None,
    seed: int = 0,
) -> PhaseResult:
    return Trainer(model, train_set, dev_set, config, checkpoints, channel, seed).run_phase(phase)
