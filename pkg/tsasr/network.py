import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from tsasr.coattention import CoAttention
from tsasr.conditioning import (
    FddtParams,
    StnoLike,
    fddt_apply,
    fddt_init,
    input_mask,
    qkb_bias_vector,
    shifted_positions,
    target_flags,
)
from tsasr.config import ConditioningConfig, ModelConfig
from tsasr.exceptions import CapacityError, DimensionError
from tsasr.layers import EncoderBlock, FeedForward, KeyValue, MultiHeadAttention, sinusoidal_embedding
from tsasr.numerics import causal_bias
from tsasr.tokenizer import Tokenizer
from tsasr.utils import DTYPE, as_tensor

logger = logging.getLogger(__name__)

MASKED_LOGIT = -1e30
PARAMETER_GROUPS = ("ctc", "fddt", "base")


@dataclass
class EncoderOutput:
    hidden: torch.Tensor
    frame_rate: Optional[float] = None
    key_extension: Optional[torch.Tensor] = None

    @property
    def num_frames(self) -> int:
        return self.hidden.shape[-2]

    def select(self, index: int) -> "EncoderOutput":
        """Pick one stream along the leading axis."""
        return EncoderOutput(
            hidden=self.hidden[index],
            frame_rate=self.frame_rate,
            key_extension=None if self.key_extension is None else self.key_extension[index],
        )


@dataclass
class DecoderCache:
    """Per-layer key/value tensors of the tokens decoded so far.

    Cross-attention keys come from one encoder output shared by every hypothesis,
    so only the self-attention entries follow a reorder.
    """

    self_kv: List[Optional[Tuple[torch.Tensor, torch.Tensor]]]
    cross_kv: List[Optional[KeyValue]]
    length: int = 0

    @classmethod
    def empty(cls, layers: int) -> "DecoderCache":
        return cls(self_kv=[None] * layers, cross_kv=[None] * layers)

    def reorder(self, indices: torch.Tensor) -> None:
        """Follow the hypotheses that survived a beam step."""
        self.self_kv = [
            None if kv is None else (kv[0].index_select(0, indices), kv[1].index_select(0, indices))
            for kv in self.self_kv
        ]


def _all_target(num_frames: int, lead: Sequence[int]) -> torch.Tensor:
    stno = torch.zeros(*lead, num_frames, 4, dtype=DTYPE)
    stno[..., 1] = 1.0
    return stno


class AudioEncoder(nn.Module):
    def __init__(self, config: ModelConfig, conditioning: ConditioningConfig):
        super().__init__()
        self.config = config
        self.conditioning = conditioning
        self.qkb = conditioning.qkb
        d = config.d_model
        self.conv1 = nn.Conv1d(config.feature_dim, d, kernel_size=3, padding=1, dtype=DTYPE)
        self.conv2 = nn.Conv1d(d, d, kernel_size=3, stride=2, padding=1, dtype=DTYPE)
        self.blocks = nn.ModuleList(
            [EncoderBlock(d, config.heads) for _ in range(config.encoder_layers)]
        )
        self.ln_post = nn.LayerNorm(d, dtype=DTYPE)

    @staticmethod
    def output_frames(num_features: int) -> int:
        return (num_features + 1) // 2

    def _subsample(self, features: torch.Tensor) -> torch.Tensor:
        lead, (frames, dim) = features.shape[:-2], features.shape[-2:]
        x = features.reshape(-1, frames, dim).transpose(1, 2)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return x.transpose(1, 2).reshape(*lead, -1, self.config.d_model)

    def forward(
        self,
        features: torch.Tensor,
        stno: Optional[StnoLike] = None,
        fddt: Optional[FddtParams] = None,
        feature_rate: Optional[float] = None,
    ) -> EncoderOutput:
        """Subsample, embed positions, and run the blocks with the configured conditioning.

        ``stno`` is at the encoder rate (half the feature rate); a missing mask
        declares every frame target-only.
        """
        if features.shape[-1] != self.config.feature_dim:
            raise DimensionError("feature width", self.config.feature_dim, features.shape[-1])
        num_frames = self.output_frames(features.shape[-2])
        if num_frames > self.config.max_frames:
            raise CapacityError("encoder input", num_frames, self.config.max_frames)
        probs = (
            _all_target(num_frames, features.shape[:-2]) if stno is None else as_tensor(stno)
        )
        if probs.shape[-2] != num_frames:
            raise DimensionError("STNO mask frames", num_frames, probs.shape[-2])

        mode = self.conditioning.mode
        if mode == "input_mask":
            upsampled = probs.repeat_interleave(2, dim=-2)[..., : features.shape[-2], :]
            features = input_mask(features, upsampled)

        x = self._subsample(features)
        key_extension = None
        if mode == "qkb":
            key_extension = qkb_bias_vector(probs, self.qkb.c)
        if mode == "qkb" and self.qkb.shift_positions:
            positions = shifted_positions(target_flags(probs)) - 1
        else:
            positions = torch.arange(num_frames)
        x = x + sinusoidal_embedding(positions, self.config.d_model)

        self_extension = key_extension if self.qkb.apply_in_encoder_self_attention else None
        for layer, block in enumerate(self.blocks):
            if mode == "fddt" and fddt is not None:
                x = fddt_apply(x, probs, fddt, layer)
            x = block(x, key_extension=self_extension)
        cross_extension = key_extension if self.qkb.apply_in_decoder_cross_attention else None
        return EncoderOutput(
            hidden=self.ln_post(x),
            frame_rate=None if feature_rate is None else feature_rate / 2,
            key_extension=cross_extension,
        )


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.self_attn_ln = nn.LayerNorm(d_model, dtype=DTYPE)
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.cross_attn_ln = nn.LayerNorm(d_model, dtype=DTYPE)
        self.cross_attn = MultiHeadAttention(d_model, heads)
        self.mlp_ln = nn.LayerNorm(d_model, dtype=DTYPE)
        self.mlp = FeedForward(d_model)


class TextDecoder(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_embedding = nn.Embedding(vocab_size, d, dtype=DTYPE)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        self.positional_embedding = nn.Parameter(
            torch.randn(config.max_target_len, d, dtype=DTYPE) * 0.01
        )
        self.blocks = nn.ModuleList([DecoderBlock(d, config.heads) for _ in range(config.decoder_layers)])
        self.ln = nn.LayerNorm(d, dtype=DTYPE)

    def forward(
        self,
        tokens: torch.Tensor,
        encoder_output: EncoderOutput,
        cache: Optional[DecoderCache] = None,
    ) -> torch.Tensor:
        """Next-token logits ``[..., U, V]`` for every position of ``tokens``."""
        offset = cache.length if cache is not None else 0
        length = tokens.shape[-1]
        if offset + length > self.config.max_target_len:
            raise CapacityError("token prefix", offset + length, self.config.max_target_len)

        x = self.token_embedding(tokens) + self.positional_embedding[offset : offset + length]
        mask = causal_bias(length, offset)
        memory, extension = encoder_output.hidden, encoder_output.key_extension
        for layer, block in enumerate(self.blocks):
            h = block.self_attn_ln(x)
            k, v, _ = block.self_attn.project_key_value(h)
            if cache is not None:
                previous = cache.self_kv[layer]
                if previous is not None:
                    k = torch.cat([previous[0], k], dim=-2)
                    v = torch.cat([previous[1], v], dim=-2)
                cache.self_kv[layer] = (k, v)
            x = x + block.self_attn.attend(h, (k, v, None), mask)

            cross = cache.cross_kv[layer] if cache is not None else None
            if cross is None:
                cross = block.cross_attn.project_key_value(memory, extension)
                if cache is not None:
                    cache.cross_kv[layer] = cross
            x = x + block.cross_attn.attend(block.cross_attn_ln(x), cross)
            x = x + block.mlp(block.mlp_ln(x))
        if cache is not None:
            cache.length = offset + length
        return self.ln(x) @ self.token_embedding.weight.T


class CtcHead(nn.Module):
    """Attention block, two stride-2 convolutions and a vocabulary projection.

    Log posteriors are restricted to the CTC label set (blank plus characters).
    """

    def __init__(self, config: ModelConfig, tokenizer: Tokenizer):
        super().__init__()
        d = self.d_model = config.d_model
        self.block = EncoderBlock(d, config.heads)
        self.conv1 = nn.Conv1d(d, d, kernel_size=3, stride=2, padding=1, dtype=DTYPE)
        self.conv2 = nn.Conv1d(d, d, kernel_size=3, stride=2, padding=1, dtype=DTYPE)
        self.proj = nn.Linear(d, tokenizer.vocab_size, dtype=DTYPE)
        excluded = torch.ones(tokenizer.vocab_size, dtype=torch.bool)
        excluded[tokenizer.ctc_token_ids] = False
        self.register_buffer("excluded", excluded, persistent=False)

    @staticmethod
    def output_frames(num_frames: int) -> int:
        return math.ceil(num_frames / 4)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """Log posteriors ``[..., ceil(T'/4), V]``; outputs covering only padding are dropped."""
        num_frames = hidden.shape[-2]
        x = self.block(hidden)
        pad = (-num_frames) % 4
        x = F.pad(x, (0, 0, 0, pad))
        lead = x.shape[:-2]
        x = x.reshape(-1, x.shape[-2], x.shape[-1]).transpose(1, 2)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = x.transpose(1, 2).reshape(*lead, -1, self.d_model)
        logits = self.proj(x).masked_fill(self.excluded, MASKED_LOGIT)
        return F.log_softmax(logits, dim=-1)[..., : self.output_frames(num_frames), :]


def ctc_greedy_decode(log_probs: torch.Tensor, blank: int = 0) -> List[int]:
    """Best-path decoding: argmax per frame, merge repeats, drop blanks."""
    best = log_probs.argmax(dim=-1).tolist()
    labels: List[int] = []
    previous = None
    for token in best:
        if token != previous and token != blank:
            labels.append(token)
        previous = token
    return labels


class TargetSpeakerModel(nn.Module):
    """Encoder-decoder with target-speaker conditioning, optional co-attention and a CTC head."""

    def __init__(
        self,
        config: ModelConfig,
        conditioning: ConditioningConfig = ConditioningConfig(),
        tokenizer: Tokenizer = Tokenizer(),
    ):
        super().__init__()
        self.config = config
        self.conditioning = conditioning
        self.tokenizer = tokenizer
        self.encoder = AudioEncoder(config, conditioning)
        self.decoder = TextDecoder(config, tokenizer.vocab_size)
        self.ctc_head = CtcHead(config, tokenizer)
        self.co_attention = (
            CoAttention(config.d_model, config.speaker_dim, config.summary_width, config.heads)
            if config.co_attention
            else None
        )
        # built last: seeded models with different conditioning share every other initial weight
        self.fddt = (
            fddt_init(config.encoder_layers, config.d_model, conditioning.fddt_init)
            if conditioning.mode == "fddt"
            else None
        )
        if conditioning.mode == "qkb":
            if conditioning.qkb.apply_in_encoder_self_attention:
                for block in self.encoder.blocks:
                    block.attn.extend_query_key()
            if conditioning.qkb.apply_in_decoder_cross_attention:
                for dec_block in self.decoder.blocks:
                    dec_block.cross_attn.extend_query_key()

        counts = {group: sum(p.numel() for _, p in params) for group, params in self.parameter_groups().items()}
        logger.info(f"Built {conditioning.mode} model with parameter counts {counts}")

    def parameter_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {g: [] for g in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            root = name.split(".")[0]
            group = "ctc" if root == "ctc_head" else "fddt" if root == "fddt" else "base"
            groups[group].append((name, param))
        return groups

    def encode(self, features: torch.Tensor, stno: Optional[StnoLike] = None) -> EncoderOutput:
        """Encode for one target speaker (no co-attention)."""
        return self.encoder(features, stno, self.fddt)

    def encode_recording(self, features: torch.Tensor, stnos: StnoLike) -> EncoderOutput:
        """Encode every target stream of a recording.

        Args:
            features: ``[..., T, F]`` mixture features
            stnos: ``[..., S, T', 4]`` one STNO mask per speaker

        Returns:
            Encoder output with hidden ``[..., S, T', d]``, refined by co-attention when enabled
        """
        probs = as_tensor(stnos)
        if probs.ndim < 3:
            raise DimensionError("stacked STNO masks", "[..., S, T', 4]", tuple(probs.shape))
        speakers = probs.shape[-3]
        expanded = features.unsqueeze(-3).expand(*features.shape[:-2], speakers, *features.shape[-2:])
        output = self.encoder(expanded, probs, self.fddt)
        if self.co_attention is not None:
            output.hidden = self.co_attention(output.hidden)
        return output

    def decode_logits(
        self, tokens: torch.Tensor, encoder_output: EncoderOutput, cache: Optional[DecoderCache] = None
    ) -> torch.Tensor:
        return self.decoder(tokens, encoder_output, cache)

    def decoder_forward(self, encoder_output: EncoderOutput, prefix: Sequence[int]) -> torch.Tensor:
        """Next-token logits ``[V]`` after ``prefix`` (which starts with BOS)."""
        if not prefix or prefix[0] != self.tokenizer.bos:
            raise ValueError("Decoder prefix must start with BOS")
        tokens = torch.tensor(list(prefix), dtype=torch.long)
        return self.decoder(tokens, encoder_output)[-1]

    def ctc_log_probs(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.ctc_head(hidden)

    def new_cache(self) -> DecoderCache:
        return DecoderCache.empty(self.config.decoder_layers)


def encoder_forward(
    model: TargetSpeakerModel, features: torch.Tensor, stno: Optional[StnoLike] = None
) -> EncoderOutput:
    return model.encode(features, stno)


def ctc_head_forward(model: TargetSpeakerModel, hidden: torch.Tensor) -> torch.Tensor:
    return model.ctc_log_probs(hidden)
