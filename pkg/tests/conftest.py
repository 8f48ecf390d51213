import itertools
import os

import numpy as np
import pytest
import torch

from tsasr.config import ConditioningConfig, ModelConfig, SynthConfig
from tsasr.diarization import stno_mask
from tsasr.models import SpeakerActivity
from tsasr.network import TargetSpeakerModel


def pytest_collection_modifyitems(config, items):
    if os.environ.get("TSASR_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set TSASR_RUN_SLOW=1 to run long reproductions")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Small model used across tests"""
    return ModelConfig(
        d_model=16,
        encoder_layers=2,
        decoder_layers=1,
        heads=2,
        feature_dim=6,
        max_frames=64,
        max_target_len=48,
    )


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(
        num_recordings=4,
        dev_recordings=2,
        feature_dim=6,
        char_frames=2,
        vocabulary_size=8,
        min_words=1,
        max_words=1,
        turns_per_speaker=1,
        max_gap_chars=2,
        overlap=0.3,
    )


def build_model(config: ModelConfig, mode: str = "none", seed: int = 0, **conditioning) -> TargetSpeakerModel:
    torch.manual_seed(seed)
    return TargetSpeakerModel(config, ConditioningConfig(mode=mode, **conditioning))


def random_stno(frames: int, generator: np.random.Generator, speakers: int = 2) -> torch.Tensor:
    """Soft STNO rows derived from random activity of ``speakers`` speakers."""
    activity = SpeakerActivity(
        values=generator.uniform(size=(speakers, frames)),
        frame_rate=25.0,
        speaker_labels=tuple(f"s{i}" for i in range(speakers)),
    )
    return torch.from_numpy(stno_mask(activity, 0).values)


def collapse_path(path, blank: int = 0):
    out, previous = [], None
    for token in path:
        if token != previous and token != blank:
            out.append(token)
        previous = token
    return out


def ctc_path_logprob(log_probs: np.ndarray, labels, prefix_only: bool = False) -> float:
    """Sum over every frame path whose collapsed output equals (or starts with) ``labels``."""
    frames, vocab = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=frames):
        out = collapse_path(path)
        hit = out[: len(labels)] == list(labels) if prefix_only else out == list(labels)
        if hit:
            total = np.logaddexp(total, sum(log_probs[t, k] for t, k in enumerate(path)))
    return float(total)
