"""
Run configuration.

Every section is a pydantic model that rejects unknown keys. A run config file
is TOML with one table per section, each holding flat ``key = value`` pairs::

    [model]
    d_model = 64
    co_attention = false

    [conditioning]
    mode = "fddt"

    [decode]
    lambda = 0.3
    beam = 4

Command-line ``--set section.key=value`` overrides are applied on top of the
file (values are parsed as TOML scalars, falling back to plain strings).
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from tsasr.exceptions import ConfigError
from tsasr.models import TrainingPhase

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

ConditioningMode = Literal["none", "input_mask", "qkb", "fddt"]
FddtInitMode = Literal["suppressive", "random"]


class ModelConfig(BaseModel):
    """Toy encoder-decoder dimensions."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = Field(default=64, gt=0, description="Model width d_m")
    encoder_layers: int = Field(default=2, ge=1, description="Encoder blocks L_e")
    decoder_layers: int = Field(default=2, ge=1, description="Decoder blocks L_d")
    heads: int = Field(default=4, ge=1, description="Attention heads H")
    feature_dim: int = Field(default=16, gt=0, description="Input feature dimension F")
    max_frames: int = Field(
        default=750, gt=0, description="Maximum encoder frames (after subsampling) per window"
    )
    max_target_len: int = Field(default=128, gt=1, description="Maximum decoder token length")
    co_attention: bool = Field(default=False, description="Insert the co-attention module")
    co_attention_dim: Optional[int] = Field(
        default=None, description="Per-speaker co-attention width d' (default d_m / 2)"
    )
    summary_dim: Optional[int] = Field(
        default=None, description="Summary width d-hat (default d_m / 4)"
    )

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")
        for name, value in (("co_attention_dim", self.speaker_dim), ("summary_dim", self.summary_width)):
            if value <= 0 or value % self.heads:
                raise ValueError(f"{name}={value} must be positive and divisible by heads")
        return self

    @property
    def speaker_dim(self) -> int:
        return self.co_attention_dim or self.d_model // 2

    @property
    def summary_width(self) -> int:
        return self.summary_dim or self.d_model // 4


class QkbConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    c: float = Field(default=50.0, ge=0.0, description="Key-extension bias for non-target frames")
    apply_in_encoder_self_attention: bool = True
    apply_in_decoder_cross_attention: bool = True
    shift_positions: bool = Field(
        default=True, description="Repeat positional embeddings on non-target frames"
    )


class ConditioningConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: ConditioningMode = Field(default="fddt", description="Target-speaker conditioning")
    c: float = Field(default=50.0, ge=0.0, description="QKb bias constant")
    qkb_encoder_self_attention: bool = True
    qkb_decoder_cross_attention: bool = True
    shift_positions: bool = True
    fddt_init: FddtInitMode = "suppressive"
    hard_masks: bool = Field(
        default=True, description="Binarize diarization before building STNO masks"
    )

    @property
    def qkb(self) -> QkbConfig:
        return QkbConfig(
            c=self.c,
            apply_in_encoder_self_attention=self.qkb_encoder_self_attention,
            apply_in_decoder_cross_attention=self.qkb_decoder_cross_attention,
            shift_positions=self.shift_positions,
        )


class DecodeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    ctc_weight: float = Field(
        default=0.3, ge=0.0, le=1.0, alias="lambda", description="Joint decoding weight"
    )
    beam: int = Field(default=4, ge=1)
    candidate_n: int = Field(default=40, ge=1, description="Attention candidates rescored by CTC")
    max_len: int = Field(default=128, ge=2)
    window_seconds: float = Field(default=30.0, gt=0.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    phases: List[TrainingPhase] = Field(default_factory=lambda: ["full"])
    batch_size: int = Field(default=8, ge=1, description="Recordings per batch")
    warmup_steps: int = Field(default=500, ge=0)
    peak_lr: float = Field(default=3e-4, gt=0.0)
    weight_decay: float = Field(default=1e-6, ge=0.0)
    ctc_weight: float = Field(default=0.3, ge=0.0, le=1.0, description="CTC loss weight")
    fddt_lr_multiplier: float = Field(default=100.0, ge=1.0)
    max_steps: int = Field(default=5000, ge=1, description="Step cap per phase")
    eval_interval: int = Field(default=500, ge=1, description="Upper bound of the eval cadence")
    patience: int = Field(default=5, ge=1, description="Early-stopping patience in evaluations")
    dev_beam: int = Field(default=1, ge=1, description="Beam used for dev tcpWER")
    dev_collar: float = Field(default=5.0, ge=0.0)
    eval_metric: Literal["tcpwer", "loss"] = Field(
        default="tcpwer", description="Dev metric driving early stopping and checkpoint selection"
    )


class SynthConfig(BaseModel):
    """Synthetic corpus generation."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_recordings: int = Field(default=1000, ge=1)
    dev_recordings: int = Field(default=50, ge=0)
    min_speakers: int = Field(default=2, ge=1)
    max_speakers: int = Field(default=2, ge=1)
    overlap: float = Field(default=0.3, ge=0.0, lt=1.0, description="Target overlap fraction")
    feature_dim: int = Field(default=16, gt=0)
    frame_rate: float = Field(default=50.0, gt=0.0, description="Feature frames per second")
    seed: int = 0
    min_words: int = Field(default=1, ge=1)
    max_words: int = Field(default=2, ge=1)
    turns_per_speaker: int = Field(default=2, ge=1)
    char_frames: int = Field(
        default=10, ge=2, multiple_of=2, description="Feature frames per character (even)"
    )
    vocabulary_size: int = Field(default=40, ge=1, description="Distinct words in the word list")
    max_gap_chars: int = Field(
        default=3, ge=1, description="Longest pause between turns, in characters, when overlap is 0"
    )
    speaker_pool: int = Field(default=20, ge=1)
    noise_std: float = Field(default=0.05, ge=0.0)
    silence_std: float = Field(default=0.01, ge=0.0)
    case_variants: bool = Field(default=False, description="Emit lower/upper label variants")
    corrupt_jitter: float = Field(default=0.3, ge=0.0, description="RTTM corruption jitter (s)")
    corrupt_deletion: float = Field(default=0.05, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        if self.min_speakers > self.max_speakers:
            raise ValueError("min_speakers must not exceed max_speakers")
        if self.max_speakers > self.speaker_pool:
            raise ValueError("speaker_pool must hold at least max_speakers speakers")
        if self.min_words > self.max_words:
            raise ValueError("min_words must not exceed max_words")
        if self.overlap > 0 and self.min_speakers < 2:
            raise ValueError("overlap > 0 needs at least two speakers per recording")
        return self


class MetricsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    collar: float = Field(default=5.0, ge=0.0, description="Time-constrained WER collar (s)")
    der_collar: float = Field(default=0.0, ge=0.0)
    normalize: bool = Field(default=False, description="Lowercase and strip punctuation")
    interpolate_word_times: bool = True
    utterance_groups: bool = Field(
        default=False, description="Utterance-group protocol (not supported)"
    )

    @model_validator(mode="after")
    def _reject_utterance_groups(self) -> "MetricsConfig":
        if self.utterance_groups:
            raise ValueError("utterance-group evaluation is not supported")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    conditioning: ConditioningConfig = Field(default_factory=ConditioningConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    data: SynthConfig = Field(default_factory=SynthConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.data.feature_dim != self.model.feature_dim:
            raise ValueError(
                f"data.feature_dim={self.data.feature_dim} differs from model.feature_dim={self.model.feature_dim}"
            )
        return self


def _parse_scalar(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` overrides to raw config data."""
    merged = {section: dict(values) for section, values in data.items()}
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(key.strip() or item, "override must look like section.key=value")
        merged.setdefault(section, {})[name] = _parse_scalar(raw.strip())
    return merged


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(key, first["msg"]) from e


def load_run_config(
    path: Optional[Path] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    """Load a TOML run config (or defaults) and apply overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(str(path), f"not valid TOML: {e}") from e
        logger.info(f"Loaded run config from {path}")
    return build_run_config(apply_overrides(data, overrides))
