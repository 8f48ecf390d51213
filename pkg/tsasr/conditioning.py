"""
Target-speaker conditioning transforms: input masking, query-key biasing with
shifted positions, and frame-level diarization-dependent transformations.

STNO arguments accept either a ``StnoMask`` or a float tensor ``[..., T, 4]``
with columns ordered (silence, target, non-target, overlap).
"""

import logging
from typing import Literal, Optional, Tuple, Union

import torch
from torch import nn

from tsasr.diarization import TARGET_THRESHOLD
from tsasr.exceptions import DimensionError
from tsasr.models import StnoMask
from tsasr.utils import as_tensor

logger = logging.getLogger(__name__)

StnoLike = Union[StnoMask, torch.Tensor]

SILENCE, TARGET, NON_TARGET, OVERLAP = range(4)
RANDOM_INIT_STD = 0.02


def _stno_tensor(stno: StnoLike) -> torch.Tensor:
    probs = as_tensor(stno)
    if probs.shape[-1] != 4:
        raise DimensionError("STNO columns", 4, probs.shape[-1])
    return probs


def target_scale(stno: StnoLike) -> torch.Tensor:
    """p_T + p_O per frame."""
    probs = _stno_tensor(stno)
    return probs[..., TARGET] + probs[..., OVERLAP]


def input_mask(features: torch.Tensor, stno: StnoLike) -> torch.Tensor:
    """Scale every feature frame by the target speaker's activity p_T + p_O."""
    scale = target_scale(stno)
    if features.shape[-2] != scale.shape[-1]:
        raise DimensionError("input mask frames", features.shape[-2], scale.shape[-1])
    return features * scale.unsqueeze(-1)


def extend_qk(w_q: torch.Tensor, w_k: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Embed square projections in (d+1) x (d+1) block matrices [[W, 0], [0, 1]]."""

    def extend(w: torch.Tensor, name: str) -> torch.Tensor:
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"{name} shape", "square matrix", tuple(w.shape))
        d = w.shape[0]
        extended = torch.zeros(d + 1, d + 1, dtype=w.dtype)
        extended[:d, :d] = w
        extended[d, d] = 1.0
        return extended

    return extend(w_q, "W_q"), extend(w_k, "W_k")


def target_flags(stno: StnoLike, threshold: float = TARGET_THRESHOLD) -> torch.Tensor:
    return target_scale(stno) >= threshold


def qkb_bias_vector(stno: StnoLike, c: float) -> torch.Tensor:
    """Appended key coordinate: 0 on target frames, -c elsewhere."""
    if c < 0:
        raise ValueError(f"QKb constant must be non-negative, got {c}")
    flags = target_flags(stno)
    bias = torch.full(flags.shape, -float(c), dtype=torch.float64)
    return bias.masked_fill(flags, 0.0)


def shifted_positions(flags: torch.Tensor) -> torch.Tensor:
    """1-based positions that advance on target frames and repeat elsewhere.

    Leading non-target frames take position 1.
    """
    flags = torch.as_tensor(flags, dtype=torch.bool)
    if flags.shape[-1] < 1:
        raise DimensionError("shifted positions length", ">= 1", flags.shape[-1])
    return torch.cumsum(flags.long(), dim=-1).clamp(min=1)


class FddtParams(nn.Module):
    """Four affine transforms (silence, target, non-target, overlap) per layer."""

    def __init__(self, layers: int, d_model: int):
        super().__init__()
        if layers < 1:
            raise ValueError(f"FDDT needs at least one layer, got {layers}")
        self.layers = layers
        self.d_model = d_model
        self.weight = nn.Parameter(torch.zeros(layers, 4, d_model, d_model, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(layers, 4, d_model, dtype=torch.float64))

    def class_outputs(self, z: torch.Tensor, layer: int) -> torch.Tensor:
        """W_k z + b_k for every class k: ``[..., T, 4, d]``."""
        if z.shape[-1] != self.d_model:
            raise DimensionError("FDDT input width", self.d_model, z.shape[-1])
        return torch.einsum("...td,ked->...tke", z, self.weight[layer]) + self.bias[layer]

    def hard_select(self, z: torch.Tensor, classes: torch.Tensor, layer: int) -> torch.Tensor:
        """Apply exactly one class transform per frame."""
        outputs = self.class_outputs(z, layer)
        index = classes.long()[..., None, None].expand(*classes.shape, 1, self.d_model)
        return outputs.gather(-2, index).squeeze(-2)

    def forward(self, z: torch.Tensor, stno: StnoLike, layer: int) -> torch.Tensor:
        return fddt_apply(z, stno, self, layer)


def fddt_init(
    layers: int,
    d_model: int,
    mode: Literal["suppressive", "random"] = "suppressive",
    generator: Optional[torch.Generator] = None,
) -> FddtParams:
    """Build FDDT parameters.

    Suppressive: every W is identity and every bias zero, except the layer-0
    silence and non-target matrices which are zero.
    Random: every entry drawn from N(0, 0.02^2).
    """
    params = FddtParams(layers, d_model)
    with torch.no_grad():
        if mode == "suppressive":
            eye = torch.eye(d_model, dtype=torch.float64)
            params.weight.copy_(eye.expand(layers, 4, d_model, d_model))
            params.weight[0, SILENCE].zero_()
            params.weight[0, NON_TARGET].zero_()
        elif mode == "random":
            params.weight.normal_(0.0, RANDOM_INIT_STD, generator=generator)
            params.bias.normal_(0.0, RANDOM_INIT_STD, generator=generator)
        else:
            raise ValueError(f"Unknown FDDT init mode: {mode}")
    return params


def fddt_apply(z: torch.Tensor, stno: StnoLike, params: FddtParams, layer: int) -> torch.Tensor:
    """Convex combination of the four class transforms weighted by STNO probabilities."""
    probs = _stno_tensor(stno)
    if probs.shape[-2] != z.shape[-2]:
        raise DimensionError("FDDT frames", z.shape[-2], probs.shape[-2])
    outputs = params.class_outputs(z, layer)
    return (outputs * probs.unsqueeze(-1)).sum(dim=-2)
