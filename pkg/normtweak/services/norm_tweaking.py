"""
Norm-Tweaking: layer-by-layer quantization in which, after each block's
Linear weights are quantized and frozen, only that block's normalization
parameters are nudged so the per-channel mean/variance of the quantized
block output matches the float block output.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import structlog
import torch

from normtweak.core.errors import (
    ConfigValidationError,
    ContractError,
    DimensionError,
    LayerError,
    NonFiniteGradientError,
    NormTweakError,
)
from normtweak.core.numerics import GradTape, Tensor, backward, log_softmax
from normtweak.models.transformer import (
    ModelConfig,
    NormParams,
    TransformerBlock,
    TransformerModel,
    block_forward,
    watch_norms,
)
from normtweak.services.quantization import QuantConfig, QuantMethod, apply_smoothquant, quantize_block

if TYPE_CHECKING:
    from normtweak.services.calibration import CalibrationSet

logger = structlog.get_logger()

DEFAULT_LR_GRID = (3e-6, 1e-5, 3e-5)


class LossKind(str, Enum):
    DIST = "dist"
    MSE = "mse"
    KL = "kl"


class ReferenceInput(str, Enum):
    FLOAT_PIPELINE = "float"
    QUANTIZED_INPUT = "quantized"


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TweakConfig:
    lr_0: float = 1e-5
    scale: float = 1.0
    iters: int = 1
    loss_kind: LossKind = LossKind.DIST
    adam: AdamConfig = field(default_factory=AdamConfig)
    lr_search: Optional[List[float]] = None
    reference_input: ReferenceInput = ReferenceInput.FLOAT_PIPELINE
    holdout_fraction: float = 0.25

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        self.reference_input = ReferenceInput(self.reference_input)
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)

    def validate(self) -> List[str]:
        violations = []
        if not self.lr_0 > 0:
            violations.append("tweak.lr_0 must be positive")
        if self.scale < 0:
            violations.append("tweak.scale must be non-negative")
        if self.iters < 0:
            violations.append("tweak.iters must be >= 0 (0 disables tweaking)")
        if self.lr_search is not None and (not self.lr_search or any(lr <= 0 for lr in self.lr_search)):
            violations.append("tweak.lr_search must be a non-empty list of positive learning rates")
        if not 0.0 < self.holdout_fraction < 1.0:
            violations.append("tweak.holdout_fraction must lie in (0, 1)")
        return violations

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["loss_kind"] = self.loss_kind.value
        data["reference_input"] = self.reference_input.value
        return data


@dataclass
class ActivationStats:
    mu: Tensor
    var: Tensor

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]


def channel_stats(t: Tensor, expected_channels: Optional[int] = None) -> ActivationStats:
    """Per-channel mean and population variance over all leading positions"""
    if t.dim() < 2:
        raise DimensionError(f"expected [..., C] activations, got {tuple(t.shape)}")
    if expected_channels is not None and t.shape[-1] != expected_channels:
        raise ContractError(f"expected {expected_channels} channels, got {t.shape[-1]}")
    flat = t.reshape(-1, t.shape[-1])
    if flat.shape[0] < 2:
        raise ContractError(f"channel statistics need at least 2 positions, got {flat.shape[0]}")
    mu = flat.mean(dim=0)
    centered = flat - mu
    return ActivationStats(mu=mu, var=(centered * centered).mean(dim=0))


def _check_channels(f: ActivationStats, q: ActivationStats) -> None:
    if f.channels != q.channels:
        raise ContractError(f"channel mismatch: {f.channels} vs {q.channels}")


def loss_dist(f: ActivationStats, q: ActivationStats) -> Tensor:
    """(1/C) * sum_c (|mu_f - mu_q| + |var_f - var_q|)"""
    _check_channels(f, q)
    return ((f.mu - q.mu).abs() + (f.var - q.var).abs()).mean()


def loss_mse(f_out: Tensor, q_out: Tensor) -> Tensor:
    if f_out.shape != q_out.shape:
        raise DimensionError(f"shape mismatch: {tuple(f_out.shape)} vs {tuple(q_out.shape)}")
    diff = f_out - q_out
    return (diff * diff).mean()


def loss_kl(f_out: Tensor, q_out: Tensor) -> Tensor:
    """Mean over positions of KL(softmax(f) || softmax(q)) across channels"""
    if f_out.shape != q_out.shape:
        raise DimensionError(f"shape mismatch: {tuple(f_out.shape)} vs {tuple(q_out.shape)}")
    log_f = log_softmax(f_out, -1)
    log_q = log_softmax(q_out, -1)
    return (log_f.exp() * (log_f - log_q)).sum(dim=-1).mean()


def tweak_loss(kind: LossKind, f_out: Tensor, q_out: Tensor) -> Tensor:
    kind = LossKind(kind)
    if kind is LossKind.MSE:
        return loss_mse(f_out, q_out)
    if kind is LossKind.KL:
        return loss_kl(f_out, q_out)
    return loss_dist(channel_stats(f_out), channel_stats(q_out))


def delta_mu(f: ActivationStats, q: ActivationStats) -> float:
    _check_channels(f, q)
    return float((f.mu - q.mu).abs().mean())


def delta_var(f: ActivationStats, q: ActivationStats) -> float:
    _check_channels(f, q)
    return float((f.var - q.var).abs().mean())


def layer_lr(cfg: TweakConfig, i: int, n_layers: int, lr_0: Optional[float] = None) -> float:
    """lr_i = lr_0 * (1 + scale * i / L), with 0-based i"""
    if n_layers < 1:
        raise ContractError("layer count must be positive")
    base = cfg.lr_0 if lr_0 is None else lr_0
    return base * (1 + cfg.scale * (i / n_layers))


@dataclass
class TweakSchedule:
    n_layers: int
    lrs: List[float]

    @classmethod
    def from_config(cls, cfg: TweakConfig, n_layers: int, lr_0: Optional[float] = None) -> "TweakSchedule":
        return cls(n_layers, [layer_lr(cfg, i, n_layers, lr_0) for i in range(n_layers)])


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    state: AdamState,
    lr: float,
    adam: Optional[AdamConfig] = None,
) -> Tuple[Dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns new tensors and a new state"""
    adam = adam or AdamConfig()
    if state.step < 0:
        raise ContractError("Adam step counter must be non-negative")
    for name, param in params.items():
        if name not in grads:
            raise ContractError(f"no gradient supplied for {name}")
        if grads[name].shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {tuple(grads[name].shape)}, expected {tuple(param.shape)}")
        if not bool(torch.isfinite(grads[name]).all()):
            raise NonFiniteGradientError(f"gradient for {name} is not finite")

    step = state.step + 1
    bias1 = 1 - adam.beta1 ** step
    bias2 = 1 - adam.beta2 ** step
    updated, m, v = {}, {}, {}
    for name, param in params.items():
        grad = grads[name]
        m[name] = adam.beta1 * state.m.get(name, torch.zeros_like(param)) + (1 - adam.beta1) * grad
        v[name] = adam.beta2 * state.v.get(name, torch.zeros_like(param)) + (1 - adam.beta2) * grad * grad
        m_hat = m[name] / bias1
        v_hat = v[name] / bias2
        updated[name] = param - lr * m_hat / (torch.sqrt(v_hat) + adam.eps)
    return updated, AdamState(step=step, m=m, v=v)


@dataclass
class LayerReport:
    layer: int
    lr: float
    pre_loss: float
    post_loss: float
    delta_mu_before: float
    delta_mu_after: float
    steps: int = 0
    skipped: bool = False
    warning: Optional[str] = None
    quant_seconds: float = 0.0
    tweak_seconds: float = 0.0


@dataclass
class TweakReport:
    quantizer: str
    loss_kind: str
    bits: int
    group_size: Optional[int]
    act_bits: Optional[int]
    iters: int
    norm_parameters_per_block: int
    linear_parameters_per_block: int
    layers: List[LayerReport] = field(default_factory=list)

    @property
    def lrs(self) -> List[float]:
        return [layer.lr for layer in self.layers]

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        data = asdict(self)
        if not include_timing:
            for layer in data["layers"]:
                layer.pop("quant_seconds")
                layer.pop("tweak_seconds")
        return data

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def timings(self) -> List[Dict[str, float]]:
        return [
            {"layer": layer.layer, "quant_seconds": layer.quant_seconds, "tweak_seconds": layer.tweak_seconds}
            for layer in self.layers
        ]


@dataclass
class TweakResult:
    model: TransformerModel
    report: TweakReport


def _norm_params(block: TransformerBlock, final_norm: Optional[NormParams]) -> Dict[str, Tensor]:
    params = {}
    for norm_name, norm in block.norms().items():
        for param_name, tensor in norm.tensors().items():
            params[f"{norm_name}.{param_name}"] = tensor
    if final_norm is not None:
        for param_name, tensor in final_norm.tensors().items():
            params[f"final_norm.{param_name}"] = tensor
    return params


def _rebuild_norm(params: Dict[str, Tensor], prefix: str, current: NormParams) -> NormParams:
    beta = None if current.beta is None else params[f"{prefix}.beta"]
    return NormParams(params[f"{prefix}.gamma"], beta)


class NormTweaker:
    """Runs the sequential quantize-then-tweak pass over every block of a float model"""

    def __init__(self, qcfg: QuantConfig, tcfg: TweakConfig, quantizer: QuantMethod):
        self.quantizer = QuantMethod(quantizer)
        self.qcfg = qcfg.for_method(self.quantizer)
        self.tcfg = tcfg

    def _layer_loss(
        self,
        block: TransformerBlock,
        final_norm: Optional[NormParams],
        x: Tensor,
        f_out: Tensor,
        f_final: Optional[Tensor],
        config: ModelConfig,
        tape: Optional[GradTape] = None,
    ) -> Tensor:
        q_out = block_forward(block, x, config, tape=tape)
        loss = tweak_loss(self.tcfg.loss_kind, f_out, q_out)
        if final_norm is not None:
            if tape is not None:
                final_norm = watch_norms(tape, final_norm, "final_norm")
            q_final = final_norm.apply(q_out, config.norm_kind, config.eps)
            loss = loss + tweak_loss(self.tcfg.loss_kind, f_final, q_final)
        return loss

    def _tweak(
        self,
        block: TransformerBlock,
        final_norm: Optional[NormParams],
        x: Tensor,
        f_out: Tensor,
        f_final: Optional[Tensor],
        config: ModelConfig,
        lr: float,
        layer: int,
    ) -> Tuple[TransformerBlock, Optional[NormParams], int, Optional[str]]:
        """Adam on norm parameters only; on a non-finite loss or gradient the layer is left untweaked"""
        state = AdamState()
        tweaked_block, tweaked_final = block, final_norm
        for _ in range(self.tcfg.iters):
            with GradTape() as tape:
                loss = self._layer_loss(tweaked_block, tweaked_final, x, f_out, f_final, config, tape)
                if not bool(torch.isfinite(loss.detach())):
                    warning = f"non-finite tweak loss at step {state.step}; layer left untweaked"
                    logger.warning("Skipping norm tweak", layer=layer, reason=warning)
                    return block, final_norm, 0, warning
                grads = backward(tape, loss)

            params = _norm_params(tweaked_block, tweaked_final)
            try:
                params, state = adam_step(params, grads, state, lr, self.tcfg.adam)
            except NonFiniteGradientError as e:
                warning = f"{e}; layer left untweaked"
                logger.warning("Skipping norm tweak", layer=layer, reason=warning)
                return block, final_norm, 0, warning

            tweaked_block = replace(
                tweaked_block,
                ln1=_rebuild_norm(params, "ln1", tweaked_block.ln1),
                ln2=_rebuild_norm(params, "ln2", tweaked_block.ln2),
            )
            if tweaked_final is not None:
                tweaked_final = _rebuild_norm(params, "final_norm", tweaked_final)
        return tweaked_block, tweaked_final, state.step, None

    @torch.no_grad()
    def _score(self, block, final_norm, x, f_out, f_final, config) -> float:
        return float(self._layer_loss(block, final_norm, x, f_out, f_final, config))

    def run(self, float_model: TransformerModel, calib: "CalibrationSet") -> TweakResult:
        config = float_model.config
        violations = self.qcfg.validate(config.hidden) + self.tcfg.validate()
        if violations:
            raise ConfigValidationError(violations)

        with torch.no_grad():
            x0 = calib.block0_input(float_model)
        if x0.dim() != 3 or x0.shape[0] * x0.shape[1] < 2:
            raise ContractError("calibration set is empty")

        source = float_model
        if self.quantizer is QuantMethod.SMOOTHQUANT and not self.qcfg.passthrough:
            source = apply_smoothquant(float_model, x0, self.qcfg.smooth_alpha)

        n_layers = config.n_layers
        n_samples = x0.shape[0]
        candidates: Sequence[Optional[float]] = [None]
        train_rows = slice(0, n_samples)
        holdout_rows = None
        if self.tcfg.lr_search and self.tcfg.iters > 0:
            if n_samples < 2:
                logger.warning("lr grid search needs at least 2 calibration samples; using lr_0", n_samples=n_samples)
            else:
                n_holdout = min(n_samples - 1, max(1, round(n_samples * self.tcfg.holdout_fraction)))
                train_rows = slice(0, n_samples - n_holdout)
                holdout_rows = slice(n_samples - n_holdout, n_samples)
                candidates = list(self.tcfg.lr_search)

        sample_block = float_model.blocks[0]
        report = TweakReport(
            quantizer=self.quantizer.value,
            loss_kind=self.tcfg.loss_kind.value,
            bits=self.qcfg.bits,
            group_size=self.qcfg.group_size,
            act_bits=self.qcfg.act_bits,
            iters=self.tcfg.iters,
            norm_parameters_per_block=sample_block.norm_parameter_count,
            linear_parameters_per_block=sample_block.linear_parameter_count,
        )

        quantized = source.clone()
        x_float, x_quant = x0, x0
        logger.info(
            "Starting norm tweaking",
            quantizer=self.quantizer.value,
            bits=self.qcfg.bits,
            group_size=self.qcfg.group_size,
            loss=self.tcfg.loss_kind.value,
            iters=self.tcfg.iters,
            n_samples=n_samples,
        )

        for layer in range(n_layers):
            try:
                layer_report, x_float, x_quant = self._process_layer(
                    layer, source, quantized, x_float, x_quant, candidates, train_rows, holdout_rows
                )
            except NormTweakError as e:
                logger.error(f"Norm tweaking failed at layer {layer}: {str(e)}")
                raise LayerError(layer, e) from e
            report.layers.append(layer_report)

        logger.info("✅ Norm tweaking finished", layers=n_layers)
        return TweakResult(model=quantized, report=report)

    def _process_layer(
        self,
        layer: int,
        source: TransformerModel,
        quantized: TransformerModel,
        x_float: Tensor,
        x_quant: Tensor,
        candidates: Sequence[Optional[float]],
        train_rows: slice,
        holdout_rows: Optional[slice],
    ) -> Tuple[LayerReport, Tensor, Tensor]:
        config = source.config
        n_layers = config.n_layers
        is_last = layer == n_layers - 1
        f_block = source.blocks[layer]

        reference = x_float if self.tcfg.reference_input is ReferenceInput.FLOAT_PIPELINE else x_quant
        with torch.no_grad():
            f_out = block_forward(f_block, reference, config)
            f_final = source.final_norm.apply(f_out, config.norm_kind, config.eps) if is_last else None

        started = time.perf_counter()
        q_block = quantize_block(quantized.blocks[layer], x_quant, config, self.qcfg, self.quantizer)
        quant_seconds = time.perf_counter() - started
        final_norm = quantized.final_norm if is_last else None

        def rows(t: Optional[Tensor], part: slice) -> Optional[Tensor]:
            return None if t is None else t[part]

        train = (x_quant[train_rows], f_out[train_rows], rows(f_final, train_rows))
        pre_loss = self._score(q_block, final_norm, *train[:2], train[2], config)

        started = time.perf_counter()
        best = (q_block, final_norm, 0, None)
        chosen_lr = layer_lr(self.tcfg, layer, n_layers)
        if self.tcfg.iters > 0:
            best_score = None
            if holdout_rows is not None:
                holdout = (x_quant[holdout_rows], f_out[holdout_rows], rows(f_final, holdout_rows))
                # a candidate has to beat the untweaked norms on the holdout rows
                best_score = self._score(q_block, final_norm, *holdout, config)
                chosen_lr = 0.0
            for candidate in candidates:
                lr = layer_lr(self.tcfg, layer, n_layers, candidate)
                outcome = self._tweak(q_block, final_norm, *train[:2], train[2], config, lr, layer)
                if holdout_rows is None:
                    best, chosen_lr = outcome, lr
                    break
                score = self._score(outcome[0], outcome[1], *holdout, config)
                if score < best_score:
                    best, best_score, chosen_lr = outcome, score, lr
            if chosen_lr == 0.0:
                logger.info("No lr candidate beat the quantized norms on the holdout rows", layer=layer)
        tweak_seconds = time.perf_counter() - started

        tweaked_block, tweaked_final, steps, warning = best
        post_loss = self._score(tweaked_block, tweaked_final, *train[:2], train[2], config)

        quantized.blocks[layer] = tweaked_block
        if is_last and tweaked_final is not None:
            quantized.final_norm = tweaked_final

        with torch.no_grad():
            q_before = block_forward(q_block, x_quant, config)
            q_out = block_forward(tweaked_block, x_quant, config)
        f_stats = channel_stats(f_out)

        layer_report = LayerReport(
            layer=layer,
            lr=chosen_lr,
            pre_loss=pre_loss,
            post_loss=post_loss,
            delta_mu_before=delta_mu(f_stats, channel_stats(q_before)),
            delta_mu_after=delta_mu(f_stats, channel_stats(q_out)),
            steps=steps,
            skipped=warning is not None,
            warning=warning,
            quant_seconds=quant_seconds,
            tweak_seconds=tweak_seconds,
        )
        logger.info(
            "Layer processed",
            layer=layer,
            lr=chosen_lr,
            pre_loss=round(pre_loss, 6),
            post_loss=round(post_loss, 6),
            delta_mu=round(layer_report.delta_mu_after, 6),
            quant_seconds=round(quant_seconds, 3),
            tweak_seconds=round(tweak_seconds, 3),
        )
        return layer_report, f_out, q_out


def tweak_model(
    float_model: TransformerModel,
    quantizer: QuantMethod,
    calib: "CalibrationSet",
    qcfg: QuantConfig,
    tcfg: TweakConfig,
) -> TweakResult:
    """Quantize ``float_model`` block by block and tweak each block's norms; ``iters=0`` is plain quantization"""
    return NormTweaker(qcfg, tcfg, quantizer).run(float_model, calib)
