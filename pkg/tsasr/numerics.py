"""
Dense tensor primitives shared by the model, the conditioning transforms and
the gradient checks.

All training math runs in float64. Reverse-mode differentiation is torch
autograd: the recorded graph is the tape, and ``nn.Module.named_parameters()``
is the parameter registry whose gradients a backward pass fills in.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import torch

from tsasr.exceptions import DimensionError, GradientCheckError

logger = logging.getLogger(__name__)

MIN_EPSILON = 1e-7
MAX_EPSILON = 1e-3


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    additive_bias: Optional[torch.Tensor] = None,
    return_weights: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """softmax_j((q_i . k_j + bias_ij) / sqrt(d)) v_j over the last two axes.

    Leading axes (batch, heads) broadcast. The bias is added before scaling, so
    an appended query/key coordinate and an explicit bias give the same score.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[-1] == 0:
        raise DimensionError("query/key width", q.shape[-1], k.shape[-1])
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("key/value length", k.shape[-2], v.shape[-2])

    scores = q @ k.transpose(-1, -2)
    if additive_bias is not None:
        if additive_bias.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(
                "attention bias shape", tuple(scores.shape[-2:]), tuple(additive_bias.shape[-2:])
            )
        scores = scores + additive_bias
    weights = torch.softmax(scores / math.sqrt(q.shape[-1]), dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def causal_bias(length: int, offset: int = 0, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Additive bias blocking attention to future positions.

    Row i (absolute position offset + i) may attend to columns 0..offset + i.
    """
    rows = torch.arange(length).unsqueeze(1) + offset
    cols = torch.arange(length + offset).unsqueeze(0)
    bias = torch.zeros(length, length + offset, dtype=dtype)
    return bias.masked_fill(cols > rows, float("-inf"))


@dataclass
class GradCheckReport:
    epsilon: float
    max_relative_error: Dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.worst < tolerance


def _sample_indices(numel: int, limit: Optional[int]) -> range | list[int]:
    if limit is None or numel <= limit:
        return range(numel)
    stride = numel / limit
    return sorted({int(i * stride) for i in range(limit)})


def finite_difference_gradcheck(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    epsilon: float = 1e-6,
    scale_floor: float = 1e-3,
    max_elements_per_param: Optional[int] = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``f`` with central differences.

    Args:
        f: Zero-argument closure returning a scalar; it must read ``params``
        params: Named float64 leaf tensors with ``requires_grad=True``
        epsilon: Central-difference step, within [1e-7, 1e-3]
        scale_floor: Lower bound of the relative-error denominator
        max_elements_per_param: Check an evenly spaced subset of large tensors

    Returns:
        Max relative error per parameter name
    """
    if not MIN_EPSILON <= epsilon <= MAX_EPSILON:
        raise ValueError(f"epsilon must lie in [{MIN_EPSILON}, {MAX_EPSILON}], got {epsilon}")

    names = list(params.keys())
    tensors = [params[n] for n in names]
    value = f()
    if value.numel() != 1:
        raise GradientCheckError(f"function returned shape {tuple(value.shape)}, not a scalar")
    if not torch.isfinite(value):
        raise GradientCheckError(f"function value is {value.item()}")
    analytic = torch.autograd.grad(value, tensors, allow_unused=True)

    report = GradCheckReport(epsilon=epsilon)
    with torch.no_grad():
        for name, tensor, grad in zip(names, tensors, analytic):
            if grad is None:
                grad = torch.zeros_like(tensor)
            flat = tensor.view(-1)
            flat_grad = grad.reshape(-1)
            worst = 0.0
            for i in _sample_indices(flat.numel(), max_elements_per_param):
                original = flat[i].item()
                flat[i] = original + epsilon
                upper = f().item()
                flat[i] = original - epsilon
                lower = f().item()
                flat[i] = original
                if not (math.isfinite(upper) and math.isfinite(lower)):
                    raise GradientCheckError(f"non-finite value while perturbing {name}[{i}]")
                numeric = (upper - lower) / (2.0 * epsilon)
                exact = flat_grad[i].item()
                denom = max(abs(exact), abs(numeric), scale_floor)
                worst = max(worst, abs(exact - numeric) / denom)
            report.max_relative_error[name] = worst
            logger.debug(f"gradcheck {name}: max relative error {worst:.3e}")
    return report
