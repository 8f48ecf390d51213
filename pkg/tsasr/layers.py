import logging
import math
from typing import Optional, Tuple

import torch
from torch import nn

from tsasr.conditioning import extend_qk
from tsasr.numerics import scaled_dot_attention
from tsasr.utils import DTYPE

logger = logging.getLogger(__name__)

# (keys, values, appended key coordinate or None)
KeyValue = Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]


def sinusoidal_embedding(positions: torch.Tensor, d_model: int) -> torch.Tensor:
    """Sinusoidal embeddings for arbitrary (possibly repeated) integer positions."""
    half = d_model // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1)
    )
    angles = positions.to(DTYPE).unsqueeze(-1) * freqs
    emb = torch.zeros(*positions.shape, d_model, dtype=DTYPE)
    emb[..., 0 : 2 * half : 2] = torch.sin(angles)
    emb[..., 1 : 2 * half : 2] = torch.cos(angles)
    return emb


class MultiHeadAttention(nn.Module):
    """Multi-head attention with optional query/key extension.

    After ``extend_query_key`` the query and key projections act on ``[x; 1]``
    and ``[x; e]`` where ``e`` is the per-key extension value. The product of
    the appended output coordinates is shared by every head and added to the
    raw scores, so the softmax scale stays sqrt(d_head).
    """

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"heads={heads} must divide d_model={d_model}")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.extended = False
        self.q_proj = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.k_proj = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.v_proj = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.out_proj = nn.Linear(d_model, d_model, dtype=DTYPE)

    def extend_query_key(self) -> None:
        if self.extended:
            return
        w_q, w_k = extend_qk(self.q_proj.weight.detach(), self.k_proj.weight.detach())
        self.q_proj = nn.Linear(self.d_model + 1, self.d_model + 1, bias=False, dtype=DTYPE)
        self.k_proj = nn.Linear(self.d_model + 1, self.d_model + 1, bias=False, dtype=DTYPE)
        with torch.no_grad():
            self.q_proj.weight.copy_(w_q)
            self.k_proj.weight.copy_(w_k)
        self.extended = True

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # [..., T, d] -> [..., H, T, d_head]
        return x.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def _query(self, x: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        if not self.extended:
            return self._split(self.q_proj(x)), None
        ones = torch.ones(*x.shape[:-1], 1, dtype=x.dtype)
        queries = self.q_proj(torch.cat([x, ones], dim=-1))
        return self._split(queries[..., : self.d_model]), queries[..., self.d_model]

    def project_key_value(
        self, memory: torch.Tensor, key_extension: Optional[torch.Tensor] = None
    ) -> KeyValue:
        if self.extended:
            if key_extension is None:
                key_extension = torch.zeros(memory.shape[:-1], dtype=memory.dtype)
            key_extension = key_extension.to(memory.dtype).expand(memory.shape[:-1])
            keys = self.k_proj(torch.cat([memory, key_extension.unsqueeze(-1)], dim=-1))
            k, k_extra = keys[..., : self.d_model], keys[..., self.d_model]
        else:
            k, k_extra = self.k_proj(memory), None
        return self._split(k), self._split(self.v_proj(memory)), k_extra

    def attend(
        self,
        x: torch.Tensor,
        key_value: KeyValue,
        additive_bias: Optional[torch.Tensor] = None,
        return_weights: bool = False,
    ) -> torch.Tensor | Tuple[torch.Tensor, torch.Tensor]:
        k, v, k_extra = key_value
        q, q_extra = self._query(x)
        if q_extra is not None and k_extra is not None:
            extra = q_extra.unsqueeze(-1) * k_extra.unsqueeze(-2)
            additive_bias = extra if additive_bias is None else additive_bias + extra
        bias = additive_bias.unsqueeze(-3) if additive_bias is not None else None
        out, weights = scaled_dot_attention(q, k, v, bias, return_weights=True)
        out = self.out_proj(out.transpose(-3, -2).flatten(-2))
        if return_weights:
            return out, weights
        return out

    def forward(
        self,
        x: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        additive_bias: Optional[torch.Tensor] = None,
        key_extension: Optional[torch.Tensor] = None,
        return_weights: bool = False,
    ) -> torch.Tensor | Tuple[torch.Tensor, torch.Tensor]:
        key_value = self.project_key_value(x if memory is None else memory, key_extension)
        return self.attend(x, key_value, additive_bias, return_weights=return_weights)

    def raw_scores(
        self,
        x: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        key_extension: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Unscaled per-head scores q_i . k_j, including the extension term."""
        k, _, k_extra = self.project_key_value(x if memory is None else memory, key_extension)
        q, q_extra = self._query(x)
        scores = q @ k.transpose(-1, -2)
        if q_extra is not None and k_extra is not None:
            scores = scores + (q_extra.unsqueeze(-1) * k_extra.unsqueeze(-2)).unsqueeze(-3)
        return scores


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, expansion: int = 4):
        super().__init__(
            nn.Linear(d_model, expansion * d_model, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(expansion * d_model, d_model, dtype=DTYPE),
        )


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.attn_ln = nn.LayerNorm(d_model, dtype=DTYPE)
        self.attn = MultiHeadAttention(d_model, heads)
        self.mlp_ln = nn.LayerNorm(d_model, dtype=DTYPE)
        self.mlp = FeedForward(d_model)

    def forward(
        self, x: torch.Tensor, key_extension: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        x = x + self.attn(self.attn_ln(x), key_extension=key_extension)
        return x + self.mlp(self.mlp_ln(x))
