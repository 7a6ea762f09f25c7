"""
Weight quantizers: symmetric RTN (per channel or per group), GPTQ with
inverse-Hessian error compensation, SmoothQuant scale migration, and
block-level orchestration of the three.
"""

from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import structlog
import torch

from normtweak.core.errors import ContractError, DimensionError, NumericError
from normtweak.core.numerics import Tensor, assert_finite
from normtweak.models.quantized import (
    QuantizedLinear,
    max_code,
    qlinear_forward,
    quantize_activations,
    round_half_away,
)
from normtweak.models.transformer import (
    ModelConfig,
    NormParams,
    TransformerBlock,
    TransformerModel,
    block_forward,
)

logger = structlog.get_logger()

__all__ = [
    "QuantMethod",
    "QuantConfig",
    "HessianEstimate",
    "compute_scales",
    "rtn_quantize",
    "estimate_hessian",
    "gptq_quantize",
    "smooth_migrate",
    "collect_act_absmax",
    "apply_smoothquant",
    "quantize_block",
    "quantize_activations",
    "qlinear_forward",
]

SUPPORTED_BITS = (2, 3, 4, 8)
PASSTHROUGH_BITS = 16

# Linear name -> observer tap holding its input
LINEAR_INPUTS = {
    "wq": "attn_in",
    "wk": "attn_in",
    "wv": "attn_in",
    "wo": "wo_in",
    "w_up": "mlp_in",
    "w_down": "down_in",
}


class QuantMethod(str, Enum):
    RTN = "rtn"
    GPTQ = "gptq"
    SMOOTHQUANT = "smoothquant"


@dataclass
class QuantConfig:
    bits: int = 4
    group_size: Optional[int] = None
    act_bits: Optional[int] = None
    smooth_alpha: float = 0.5
    damping_frac: float = 0.01
    block_size: int = 32

    @property
    def passthrough(self) -> bool:
        return self.bits >= PASSTHROUGH_BITS

    def for_method(self, method: "QuantMethod") -> "QuantConfig":
        """SmoothQuant runs in W*A8 mode unless activation bits were set explicitly"""
        if QuantMethod(method) is QuantMethod.SMOOTHQUANT and self.act_bits is None:
            return replace(self, act_bits=8)
        return self

    def validate(self, hidden: Optional[int] = None) -> List[str]:
        violations = []
        if self.bits not in SUPPORTED_BITS and self.bits != PASSTHROUGH_BITS:
            violations.append(f"quant.bits must be one of {SUPPORTED_BITS} or {PASSTHROUGH_BITS}, got {self.bits}")
        if self.group_size is not None:
            if self.group_size < 1:
                violations.append("quant.group_size must be positive")
            elif hidden is not None and hidden % self.group_size != 0:
                violations.append(f"quant.group_size {self.group_size} must divide hidden size {hidden}")
        if self.act_bits is not None and self.act_bits != 8:
            violations.append(f"quant.act_bits must be 8 when set, got {self.act_bits}")
        if not 0.0 <= self.smooth_alpha <= 1.0:
            violations.append("quant.smooth_alpha must lie in [0, 1]")
        if not self.damping_frac > 0:
            violations.append("quant.damping_frac must be positive")
        if self.block_size < 1:
            violations.append("quant.block_size must be positive")
        return violations

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class HessianEstimate:
    H: Tensor
    damping: float
    n_positions: int


def _check_granularity(W: Tensor, cfg: QuantConfig) -> None:
    if W.dim() != 2:
        raise DimensionError(f"weights must be 2-D [out x in], got {tuple(W.shape)}")
    if cfg.bits not in SUPPORTED_BITS:
        raise ContractError(f"cannot quantize to {cfg.bits} bits")
    if cfg.group_size is not None and (cfg.group_size < 1 or W.shape[1] % cfg.group_size != 0):
        raise ContractError(f"group size {cfg.group_size} does not divide input dimension {W.shape[1]}")


def compute_scales(W: Tensor, bits: int, group_size: Optional[int] = None) -> Tensor:
    """max|w| / (2^(b-1)-1) per output channel (or group); all-zero groups get scale 1"""
    out_features, in_features = W.shape
    width = in_features if group_size is None else group_size
    absmax = W.abs().reshape(out_features, -1, width).amax(dim=-1)
    scales = absmax / max_code(bits)
    return torch.where(absmax > 0, scales, torch.ones_like(scales))


def rtn_quantize(W: Tensor, cfg: QuantConfig) -> QuantizedLinear:
    _check_granularity(W, cfg)
    scales = compute_scales(W, cfg.bits, cfg.group_size)
    expanded = scales if cfg.group_size is None else scales.repeat_interleave(cfg.group_size, dim=1)
    qmax = max_code(cfg.bits)
    codes = torch.clamp(round_half_away(W / expanded), -qmax, qmax).to(torch.int8)
    return QuantizedLinear(codes=codes, scales=scales, bits=cfg.bits, group_size=cfg.group_size, act_bits=cfg.act_bits)


def estimate_hessian(activations: Iterable[Tensor], damping_frac: float = 0.01) -> HessianEstimate:
    """H = 2 * sum(x x^T) over every position, plus damping_frac * mean(diag(H)) * I"""
    H = None
    n_positions = 0
    for batch in activations:
        x = batch.detach().reshape(-1, batch.shape[-1]).double()
        contribution = 2.0 * (x.t() @ x)
        H = contribution if H is None else H + contribution
        n_positions += x.shape[0]
    if H is None:
        raise ContractError("estimate_hessian needs at least one activation batch")

    H = (H + H.t()) / 2
    damping = damping_frac * float(torch.diagonal(H).mean())
    if damping <= 0:
        # all-zero activations: damp against a unit diagonal instead
        damping = damping_frac
    H = H + damping * torch.eye(H.shape[0], dtype=H.dtype)
    return HessianEstimate(H=H, damping=damping, n_positions=n_positions)


def _upper_inverse_cholesky(hessian: HessianEstimate) -> Tensor:
    try:
        lower = torch.linalg.cholesky(hessian.H.double())
        inverse = torch.cholesky_inverse(lower)
        return torch.linalg.cholesky(inverse, upper=True)
    except RuntimeError as e:
        raise NumericError(
            f"Hessian is not positive definite after damping {hessian.damping:.3g}; increase damping_frac"
        ) from e


def gptq_quantize(W: Tensor, hessian: HessianEstimate, cfg: QuantConfig) -> QuantizedLinear:
    """Column-by-column quantization with OBS-style compensation of the remaining columns"""
    _check_granularity(W, cfg)
    rows, cols = W.shape
    if tuple(hessian.H.shape) != (cols, cols):
        raise DimensionError(f"Hessian shape {tuple(hessian.H.shape)} does not match weight input dim {cols}")

    Hinv = _upper_inverse_cholesky(hessian).to(W.dtype)
    W = W.clone()
    qmax = max_code(cfg.bits)
    group_size = cfg.group_size

    if group_size is None:
        scales = compute_scales(W, cfg.bits)
    else:
        scales = torch.empty(rows, cols // group_size, dtype=W.dtype)
    codes = torch.zeros(rows, cols, dtype=torch.int8)

    for i1 in range(0, cols, cfg.block_size):
        i2 = min(i1 + cfg.block_size, cols)
        W1 = W[:, i1:i2].clone()
        Err1 = torch.zeros_like(W1)
        Hinv1 = Hinv[i1:i2, i1:i2]

        for i in range(i2 - i1):
            col = i1 + i
            if group_size is not None and col % group_size == 0:
                pending = torch.cat([W1[:, i:], W[:, i2:]], dim=1)[:, :group_size]
                scales[:, col // group_size] = compute_scales(pending, cfg.bits)[:, 0]
            scale = scales[:, 0] if group_size is None else scales[:, col // group_size]

            w = W1[:, i]
            q = torch.clamp(round_half_away(w / scale), -qmax, qmax)
            codes[:, col] = q.to(torch.int8)

            err = (w - q * scale) / Hinv1[i, i]
            W1[:, i:] -= err.unsqueeze(1) * Hinv1[i, i:].unsqueeze(0)
            Err1[:, i] = err

        W[:, i2:] -= Err1 @ Hinv[i1:i2, i2:]

    return QuantizedLinear(codes=codes, scales=scales, bits=cfg.bits, group_size=group_size, act_bits=cfg.act_bits)


def smooth_migrate(W: Tensor, act_absmax: Tensor, alpha: float) -> Tuple[Tensor, Tensor]:
    """s_j = act_absmax_j^alpha / weight_absmax_j^(1-alpha); returns (W * s, s)"""
    if act_absmax.shape != (W.shape[1],):
        raise DimensionError(f"act_absmax must have shape ({W.shape[1]},), got {tuple(act_absmax.shape)}")
    act = act_absmax.to(W.dtype).clamp(min=1e-5)
    weight_absmax = W.abs().amax(dim=0).clamp(min=1e-5)
    divisor = act.pow(alpha) / weight_absmax.pow(1 - alpha)
    return W * divisor, divisor


@torch.no_grad()
def collect_act_absmax(model: TransformerModel, x: Tensor) -> List[Dict[str, Tensor]]:
    """Per-block, per-channel max |activation| at every Linear input tap"""
    stats = []
    for block in model.blocks:
        absmax: Dict[str, Tensor] = {}

        def observe(name: str, t: Tensor, absmax=absmax) -> None:
            current = t.abs().reshape(-1, t.shape[-1]).amax(dim=0)
            absmax[name] = current if name not in absmax else torch.maximum(absmax[name], current)

        x = block_forward(block, x, model.config, observer=observe)
        stats.append(absmax)
    return stats


def _fold_divisor(norm: NormParams, divisor: Tensor) -> NormParams:
    beta = None if norm.beta is None else norm.beta / divisor
    return NormParams(norm.gamma / divisor, beta)


def apply_smoothquant(model: TransformerModel, x: Tensor, alpha: float) -> TransformerModel:
    """Migrate activation range into weights; the float model output is unchanged.

    q/k/v share the pre-attention norm divisor, the output projection divisor
    folds into the value-projection rows, and the up-projection divisor folds
    into the pre-MLP norm. The down-projection stays unsmoothed since its
    input passes through GELU.
    """
    stats = collect_act_absmax(model, x)
    h = model.config.hidden
    migrated = model.clone()

    for index, (block, absmax) in enumerate(zip(migrated.blocks, stats)):
        stacked = torch.cat([block.wq, block.wk, block.wv], dim=0)
        stacked, attn_divisor = smooth_migrate(stacked, absmax["attn_in"], alpha)
        wq, wk, wv = stacked.split(h, dim=0)

        wo, out_divisor = smooth_migrate(block.wo, absmax["wo_in"], alpha)
        wv = wv / out_divisor.unsqueeze(1)

        w_up, mlp_divisor = smooth_migrate(block.w_up, absmax["mlp_in"], alpha)

        migrated.blocks[index] = replace(
            block,
            wq=wq.contiguous(),
            wk=wk.contiguous(),
            wv=wv.contiguous(),
            wo=wo,
            w_up=w_up,
            ln1=_fold_divisor(block.ln1, attn_divisor),
            ln2=_fold_divisor(block.ln2, mlp_divisor),
        )
        logger.debug(
            "SmoothQuant migration",
            layer=index,
            alpha=alpha,
            attn_divisor_max=float(attn_divisor.max()),
            mlp_divisor_max=float(mlp_divisor.max()),
        )
    return migrated


@torch.no_grad()
def quantize_block(
    block: TransformerBlock,
    x: Tensor,
    config: ModelConfig,
    qcfg: QuantConfig,
    method: QuantMethod,
) -> TransformerBlock:
    """Quantize every Linear of a float block; ``x`` is the block input used for GPTQ Hessians"""
    if qcfg.passthrough:
        return replace(block)
    for name, w in block.linears().items():
        if isinstance(w, QuantizedLinear):
            raise ContractError(f"{name} is already quantized")

    method = QuantMethod(method)
    if method is QuantMethod.GPTQ:
        assert_finite(x, "GPTQ calibration input")
        captured: Dict[str, List[Tensor]] = {tap: [] for tap in set(LINEAR_INPUTS.values())}
        block_forward(block, x, config, observer=lambda name, t: captured[name].append(t.detach()))
        hessians = {tap: estimate_hessian(batches, qcfg.damping_frac) for tap, batches in captured.items()}
        quantized = {name: gptq_quantize(w, hessians[LINEAR_INPUTS[name]], qcfg) for name, w in block.linears().items()}
    else:
        quantized = {name: rtn_quantize(w, qcfg) for name, w in block.linears().items()}
    return replace(block, **quantized)
