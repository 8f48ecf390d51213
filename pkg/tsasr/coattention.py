"""
Inter-speaker co-attention over the per-speaker encoder outputs of one recording.

Shapes are time-major: the S speaker streams arrive stacked as ``[..., S, T, d]``.
Query and key projections are a single per-head block shared by every speaker;
stacking the projected speakers along the feature axis is the same as applying
the block-diagonal projection assembled for the current S, so the number of
speakers can change from one recording to the next.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

from tsasr.exceptions import DimensionError, EmptyInputError
from tsasr.layers import MultiHeadAttention
from tsasr.numerics import scaled_dot_attention
from tsasr.utils import DTYPE

logger = logging.getLogger(__name__)


@dataclass
class CoAttentionTrace:
    """Attention weights of the last forward pass, kept for inspection."""

    speaker_weights: torch.Tensor
    summary_weights: torch.Tensor


class CoAttention(nn.Module):
    def __init__(self, d_model: int, speaker_dim: int, summary_dim: int, heads: int):
        super().__init__()
        for name, value in (("speaker_dim", speaker_dim), ("summary_dim", summary_dim)):
            if value % heads:
                raise ValueError(f"heads={heads} must divide {name}={value}")
        self.d_model = d_model
        self.speaker_dim = speaker_dim
        self.summary_dim = summary_dim
        self.heads = heads

        self.summary_proj = nn.Linear(d_model, summary_dim, bias=False, dtype=DTYPE)  # W_A
        self.summary_ln = nn.LayerNorm(summary_dim, dtype=DTYPE)
        self.speaker_proj = nn.Linear(d_model, speaker_dim, bias=False, dtype=DTYPE)  # W_M
        self.speaker_ln = nn.LayerNorm(speaker_dim, dtype=DTYPE)

        # H stacked (d'/H x d') blocks, shared by theta and xi
        self.query_blocks = nn.Linear(speaker_dim, speaker_dim, bias=False, dtype=DTYPE)
        self.key_blocks = nn.Linear(speaker_dim, speaker_dim, bias=False, dtype=DTYPE)
        self.speaker_value = nn.Linear(speaker_dim, speaker_dim, bias=False, dtype=DTYPE)
        self.summary_value = nn.Linear(summary_dim, summary_dim, bias=False, dtype=DTYPE)
        self.speaker_out = nn.Linear(speaker_dim, speaker_dim, bias=False, dtype=DTYPE)  # W_O of theta
        self.summary_out = nn.Linear(summary_dim, summary_dim, bias=False, dtype=DTYPE)  # W_O of xi
        self.speaker_ctx_ln = nn.LayerNorm(speaker_dim, dtype=DTYPE)
        self.summary_ctx_ln = nn.LayerNorm(summary_dim, dtype=DTYPE)

        self.summary_attn = MultiHeadAttention(summary_dim, heads)  # omega
        self.refine_ln = nn.LayerNorm(summary_dim, dtype=DTYPE)

        self.fusion = nn.Linear(speaker_dim + summary_dim, d_model, bias=False, dtype=DTYPE)  # W_F
        nn.init.zeros_(self.fusion.weight)

        self.last_trace: Optional[CoAttentionTrace] = None

    def _stacked_heads(self, x: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
        # [..., S, T, d'] -> [..., H, T, S * d'/H]
        heads = proj(x).unflatten(-1, (self.heads, self.speaker_dim // self.heads))
        return heads.transpose(-4, -2).flatten(-2)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # [..., T, d] -> [..., H, T, d/H]
        return x.unflatten(-1, (self.heads, x.shape[-1] // self.heads)).transpose(-3, -2)

    @staticmethod
    def _merge(x: torch.Tensor) -> torch.Tensor:
        return x.transpose(-3, -2).flatten(-2)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """Refine stacked speaker streams ``[..., S, T, d]``; output has the same shape."""
        if hidden.ndim < 3 or hidden.shape[-1] != self.d_model:
            raise DimensionError("co-attention input", f"[..., S, T, {self.d_model}]", tuple(hidden.shape))

        summary = self.summary_ln(self.summary_proj(hidden.mean(dim=-3)))  # A
        speakers = self.speaker_ln(self.speaker_proj(hidden))  # M_s

        # one weight tensor per head, shared by M'_s and A'
        q = self._stacked_heads(speakers, self.query_blocks)
        k = self._stacked_heads(speakers, self.key_blocks)
        summary_heads, weights = scaled_dot_attention(
            q, k, self._split(self.summary_value(summary)), return_weights=True
        )
        speaker_heads = weights.unsqueeze(-4) @ self._split(self.speaker_value(speakers))

        speaker_ctx = self.speaker_ctx_ln(self.speaker_out(self._merge(speaker_heads)) + speakers)  # M'_s
        summary_ctx = self.summary_ctx_ln(self.summary_out(self._merge(summary_heads)) + summary)  # A'
        refined = self.refine_ln(self.summary_attn(summary_ctx) + summary_ctx)  # A-bar

        refined = refined.unsqueeze(-3).expand(*speaker_ctx.shape[:-1], self.summary_dim)
        fused = self.fusion(torch.cat([speaker_ctx, refined], dim=-1))  # M-bar_s
        self.last_trace = CoAttentionTrace(
            speaker_weights=weights.detach(),
            summary_weights=weights.detach(),
        )
        return hidden + fused


def co_attention_forward(
    hidden_states: Sequence[torch.Tensor], module: CoAttention
) -> List[torch.Tensor]:
    """Apply co-attention to S per-speaker encoder outputs of equal shape."""
    if not hidden_states:
        raise EmptyInputError("co-attention needs at least one speaker")
    shape = hidden_states[0].shape
    for s, h in enumerate(hidden_states):
        if h.shape != shape:
            raise DimensionError(f"speaker {s} encoder output", tuple(shape), tuple(h.shape))
    refined = module(torch.stack(list(hidden_states), dim=-3))
    return list(refined.unbind(dim=-3))
