"""
Next-token training of the toy transformer, used to produce the float models
that the quantization experiments start from
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import structlog
import torch
import torch.nn.functional as F

from normtweak.core.errors import ContractError, TrainingDivergedError
from normtweak.core.numerics import GradTape, Rng, Tensor, backward
from normtweak.models.quantized import QuantizedLinear
from normtweak.models.transformer import LINEAR_NAMES, NormParams, TransformerBlock, TransformerModel, forward
from normtweak.services.norm_tweaking import AdamConfig, AdamState, adam_step

logger = structlog.get_logger()

MIN_CORPUS_WINDOWS = 10


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 3e-3
    batch_size: int = 8
    seq_len: int = 0  # 0 means the model's max_seq_len
    log_every: int = 50
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)

    def validate(self) -> List[str]:
        violations = []
        if self.steps < 0:
            violations.append("train.steps must be non-negative")
        if not self.lr > 0:
            violations.append("train.lr must be positive")
        if self.batch_size < 1:
            violations.append("train.batch_size must be positive")
        if self.seq_len < 0:
            violations.append("train.seq_len must be non-negative")
        if self.log_every < 1:
            violations.append("train.log_every must be positive")
        return violations

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: TransformerModel
    losses: List[float] = field(default_factory=list)


def _watch_model(tape: GradTape, model: TransformerModel) -> TransformerModel:
    """A view of ``model`` in which every tensor is a tape leaf named as in ``named_tensors``"""

    def norm(norm_params: NormParams, prefix: str) -> NormParams:
        beta = None if norm_params.beta is None else tape.watch(f"{prefix}.beta", norm_params.beta)
        return NormParams(tape.watch(f"{prefix}.gamma", norm_params.gamma), beta)

    blocks = []
    for index, block in enumerate(model.blocks):
        prefix = f"blocks.{index}"
        blocks.append(
            TransformerBlock(
                **{name: tape.watch(f"{prefix}.{name}", getattr(block, name)) for name in LINEAR_NAMES},
                ln1=norm(block.ln1, f"{prefix}.ln1"),
                ln2=norm(block.ln2, f"{prefix}.ln2"),
            )
        )
    return TransformerModel(
        config=model.config,
        tok_emb=tape.watch("tok_emb", model.tok_emb),
        pos_emb=tape.watch("pos_emb", model.pos_emb),
        blocks=blocks,
        final_norm=norm(model.final_norm, "final_norm"),
    )


def _rebuild(model: TransformerModel, params: Dict[str, Tensor]) -> TransformerModel:
    def norm(norm_params: NormParams, prefix: str) -> NormParams:
        beta = None if norm_params.beta is None else params[f"{prefix}.beta"]
        return NormParams(params[f"{prefix}.gamma"], beta)

    blocks = [
        TransformerBlock(
            **{name: params[f"blocks.{i}.{name}"] for name in LINEAR_NAMES},
            ln1=norm(block.ln1, f"blocks.{i}.ln1"),
            ln2=norm(block.ln2, f"blocks.{i}.ln2"),
        )
        for i, block in enumerate(model.blocks)
    ]
    return TransformerModel(model.config, params["tok_emb"], params["pos_emb"], blocks, norm(model.final_norm, "final_norm"))


def next_token_loss(model: TransformerModel, windows: Tensor) -> Tensor:
    """Mean cross-entropy of predicting ``windows[:, 1:]`` from ``windows[:, :-1]``"""
    logits = forward(model, windows[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), windows[:, 1:].reshape(-1))


def sample_windows(corpus: Tensor, n: int, length: int, rng: Rng) -> Tensor:
    starts = rng.randint(corpus.numel() - length + 1, (n,))
    return torch.stack([corpus[int(s): int(s) + length] for s in starts])


def train_toy(model: TransformerModel, corpus: Tensor, cfg: TrainConfig, rng: Rng) -> TrainResult:
    """Full-parameter Adam on next-token cross-entropy over random corpus windows"""
    config = model.config
    if any(isinstance(w, QuantizedLinear) for block in model.blocks for w in block.linears().values()):
        raise ContractError("train_toy needs a float model")
    corpus = corpus.reshape(-1).long()
    if corpus.numel() < MIN_CORPUS_WINDOWS * config.max_seq_len:
        raise ContractError(
            f"training corpus has {corpus.numel()} tokens; need at least "
            f"{MIN_CORPUS_WINDOWS * config.max_seq_len} (10 x max_seq_len)"
        )
    if cfg.steps == 0:
        return TrainResult(model=model, losses=[])

    seq_len = min(cfg.seq_len or config.max_seq_len, config.max_seq_len)
    state = AdamState()
    params = dict(model.named_tensors())
    losses = []
    logger.info("Starting toy training", steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seq_len=seq_len)

    for step in range(cfg.steps):
        windows = sample_windows(corpus, cfg.batch_size, seq_len + 1, rng)
        with GradTape() as tape:
            loss = next_token_loss(_watch_model(tape, model), windows)
            loss_value = loss.detach().item()
            if not math.isfinite(loss_value):
                logger.error("Training diverged", step=step, loss=loss_value)
                raise TrainingDivergedError(f"non-finite training loss at step {step}")
            grads = backward(tape, loss)

        params, state = adam_step(params, grads, state, cfg.lr, cfg.adam)
        model = _rebuild(model, params)
        losses.append(loss_value)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info("Training step", step=step, loss=round(loss_value, 4))

    logger.info("✅ Toy training finished", first_loss=round(losses[0], 4), last_loss=round(losses[-1], 4))
    return TrainResult(model=model, losses=losses)
