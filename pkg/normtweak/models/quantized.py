"""
Quantized Linear representation and its dequantizing forward
"""

from dataclasses import dataclass, replace
from typing import Optional

import torch

from normtweak.core.errors import ContractError, DimensionError
from normtweak.core.numerics import Tensor, linear


def round_half_away(x: Tensor) -> Tensor:
    """Round to nearest, ties away from zero (platform independent)"""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def max_code(bits: int) -> int:
    # symmetric grid, the most negative code -2^(b-1) is never used
    return 2 ** (bits - 1) - 1


@dataclass
class QuantizedLinear:
    """Integer codes ``[out x in]`` with one scale per output channel or per (channel, group)"""

    codes: Tensor
    scales: Tensor
    bits: int
    group_size: Optional[int] = None
    act_bits: Optional[int] = None

    @property
    def out_features(self) -> int:
        return self.codes.shape[0]

    @property
    def in_features(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self):
        return self.codes.shape

    def dequantize(self) -> Tensor:
        scales = self.scales
        if self.group_size is not None:
            scales = scales.repeat_interleave(self.group_size, dim=1)
        return self.codes.to(scales.dtype) * scales

    def with_scale_dtype(self, dtype: torch.dtype) -> "QuantizedLinear":
        return replace(self, scales=self.scales.to(dtype))


def quantize_activations(x: Tensor, act_bits: int = 8) -> Tensor:
    """Dynamic per-tensor symmetric fake quantization.

    The rounding is straight-through when ``x`` is being differentiated.
    """
    if act_bits != 8:
        raise ContractError(f"only 8-bit activation quantization is supported, got {act_bits}")
    qmax = max_code(act_bits)
    absmax = x.detach().abs().max()
    if float(absmax) == 0.0:
        return x
    scale = absmax / qmax
    fake = torch.clamp(round_half_away(x.detach() / scale), -qmax, qmax) * scale
    if x.requires_grad:
        return x + (fake - x).detach()
    return fake


def qlinear_forward(ql: QuantizedLinear, x: Tensor) -> Tensor:
    if x.shape[-1] != ql.in_features:
        raise DimensionError(
            f"quantized linear expects input dim {ql.in_features}, got {tuple(x.shape)}"
        )
    if ql.act_bits is not None:
        x = quantize_activations(x, ql.act_bits)
    return linear(x, ql.dequantize().to(x.dtype))
