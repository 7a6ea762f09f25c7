"""
Toy decoder-only transformer: pre-norm blocks, causal attention, tied output head
"""

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import structlog
import torch

from normtweak.core.errors import ConfigValidationError, ContractError, DimensionError, InputError
from normtweak.core.numerics import (
    GradTape,
    Rng,
    Tensor,
    gelu,
    layernorm_forward,
    linear,
    matmul,
    rmsnorm_forward,
    softmax,
    transpose,
)
from normtweak.models.quantized import QuantizedLinear, qlinear_forward

logger = structlog.get_logger()

Linear = Union[Tensor, QuantizedLinear]
Observer = Callable[[str, Tensor], None]

LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_up", "w_down")
NORM_NAMES = ("ln1", "ln2")


class NormKind(str, Enum):
    LAYERNORM = "layernorm"
    RMSNORM = "rmsnorm"


@dataclass
class ModelConfig:
    vocab_size: int = 512
    hidden: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 128
    norm_kind: NormKind = NormKind.LAYERNORM
    eps: float = 1e-5

    def __post_init__(self):
        self.norm_kind = NormKind(self.norm_kind)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def validate(self) -> List[str]:
        violations = []
        for name in ("vocab_size", "hidden", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                violations.append(f"model.{name} must be positive")
        if self.n_heads >= 1 and self.hidden % self.n_heads != 0:
            violations.append(f"model.hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads})")
        if self.max_seq_len < 2:
            violations.append("model.max_seq_len must be at least 2")
        if not self.eps > 0:
            violations.append("model.eps must be positive")
        return violations

    def check(self) -> "ModelConfig":
        violations = self.validate()
        if violations:
            raise ConfigValidationError(violations)
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["norm_kind"] = self.norm_kind.value
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Optional[Tensor] = None

    def apply(self, x: Tensor, kind: NormKind, eps: float) -> Tensor:
        if kind is NormKind.RMSNORM:
            return rmsnorm_forward(x, self.gamma, eps)
        return layernorm_forward(x, self.gamma, self.beta, eps)

    def tensors(self) -> Dict[str, Tensor]:
        params = {"gamma": self.gamma}
        if self.beta is not None:
            params["beta"] = self.beta
        return params

    @property
    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.tensors().values())


@dataclass
class TransformerBlock:
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    w_up: Linear
    w_down: Linear
    ln1: NormParams
    ln2: NormParams

    def linears(self) -> Dict[str, Linear]:
        return {name: getattr(self, name) for name in LINEAR_NAMES}

    def norms(self) -> Dict[str, NormParams]:
        return {name: getattr(self, name) for name in NORM_NAMES}

    @property
    def norm_parameter_count(self) -> int:
        return sum(norm.parameter_count for norm in self.norms().values())

    @property
    def linear_parameter_count(self) -> int:
        return sum(w.shape[0] * w.shape[1] for w in self.linears().values())


@dataclass
class TransformerModel:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: List[TransformerBlock]
    final_norm: NormParams

    def __post_init__(self):
        if len(self.blocks) != self.config.n_layers:
            raise ContractError(
                f"model has {len(self.blocks)} blocks but config.n_layers={self.config.n_layers}"
            )

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def named_tensors(self) -> Iterator[Tuple[str, Linear]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for index, block in enumerate(self.blocks):
            for name, weight in block.linears().items():
                yield f"blocks.{index}.{name}", weight
            for norm_name, norm in block.norms().items():
                for param_name, tensor in norm.tensors().items():
                    yield f"blocks.{index}.{norm_name}.{param_name}", tensor
        for param_name, tensor in self.final_norm.tensors().items():
            yield f"final_norm.{param_name}", tensor

    def clone(self) -> "TransformerModel":
        return copy.deepcopy(self)

    def to(self, dtype: torch.dtype) -> "TransformerModel":
        def cast(value):
            if isinstance(value, QuantizedLinear):
                return value.with_scale_dtype(dtype)
            return value.to(dtype)

        def cast_norm(norm: NormParams) -> NormParams:
            return NormParams(cast(norm.gamma), None if norm.beta is None else cast(norm.beta))

        blocks = [
            TransformerBlock(
                **{name: cast(w) for name, w in block.linears().items()},
                ln1=cast_norm(block.ln1),
                ln2=cast_norm(block.ln2),
            )
            for block in self.blocks
        ]
        return TransformerModel(
            config=self.config,
            tok_emb=cast(self.tok_emb),
            pos_emb=cast(self.pos_emb),
            blocks=blocks,
            final_norm=cast_norm(self.final_norm),
        )


@dataclass
class BlockIO:
    input: Tensor
    output: Tensor


@dataclass
class BlockTrace:
    layers: List[BlockIO] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> BlockIO:
        return self.layers[index]


def _init_norm(hidden: int, kind: NormKind, dtype: torch.dtype) -> NormParams:
    beta = None if kind is NormKind.RMSNORM else torch.zeros(hidden, dtype=dtype)
    return NormParams(torch.ones(hidden, dtype=dtype), beta)


def init_model(config: ModelConfig, rng: Rng, std: float = 0.02, dtype: torch.dtype = torch.float32) -> TransformerModel:
    """GPT-2 style initialization with residual projections scaled by 1/sqrt(2L)"""
    config.check()
    h = config.hidden
    residual_std = std / math.sqrt(2 * config.n_layers)

    blocks = []
    for _ in range(config.n_layers):
        blocks.append(
            TransformerBlock(
                wq=rng.normal((h, h), std, dtype),
                wk=rng.normal((h, h), std, dtype),
                wv=rng.normal((h, h), std, dtype),
                wo=rng.normal((h, h), residual_std, dtype),
                w_up=rng.normal((4 * h, h), std, dtype),
                w_down=rng.normal((h, 4 * h), residual_std, dtype),
                ln1=_init_norm(h, config.norm_kind, dtype),
                ln2=_init_norm(h, config.norm_kind, dtype),
            )
        )

    model = TransformerModel(
        config=config,
        tok_emb=rng.normal((config.vocab_size, h), std, dtype),
        pos_emb=rng.normal((config.max_seq_len, h), std, dtype),
        blocks=blocks,
        final_norm=_init_norm(h, config.norm_kind, dtype),
    )
    logger.info(
        "Initialized toy transformer",
        hidden=h,
        n_layers=config.n_layers,
        vocab_size=config.vocab_size,
        seed=rng.seed,
    )
    return model


def apply_linear(weight: Linear, x: Tensor) -> Tensor:
    if isinstance(weight, QuantizedLinear):
        return qlinear_forward(weight, x)
    return linear(x, weight)


def watch_norms(tape: GradTape, norm: NormParams, prefix: str) -> NormParams:
    gamma = tape.watch(f"{prefix}.gamma", norm.gamma)
    beta = None if norm.beta is None else tape.watch(f"{prefix}.beta", norm.beta)
    return NormParams(gamma, beta)


def watch_block_norms(tape: GradTape, block: TransformerBlock) -> TransformerBlock:
    """Return a view of ``block`` whose norm parameters are tape leaves"""
    return replace(block, ln1=watch_norms(tape, block.ln1, "ln1"), ln2=watch_norms(tape, block.ln2, "ln2"))


def _causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    batch, seq, hidden = q.shape
    head_dim = hidden // n_heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, seq, n_heads, head_dim).transpose(1, 2)

    q, k, v = split(q), split(k), split(v)
    scores = matmul(q, transpose(k)) / math.sqrt(head_dim)
    future = torch.ones(seq, seq, dtype=torch.bool).triu(1)
    scores = scores.masked_fill(future, float("-inf"))
    out = matmul(softmax(scores, -1), v)
    return out.transpose(1, 2).reshape(batch, seq, hidden)


def block_forward(
    block: TransformerBlock,
    x: Tensor,
    config: ModelConfig,
    tape: Optional[GradTape] = None,
    observer: Optional[Observer] = None,
) -> Tensor:
    """Pre-norm block: x + Attn(Norm1(x)), then + MLP(Norm2(.)).

    Passing a ``tape`` records the forward with this block's norm parameters
    watched (names ``ln1.gamma``, ``ln1.beta``, ``ln2.gamma``, ``ln2.beta``).
    ``observer`` receives the inputs of each Linear group, keyed
    ``attn_in`` / ``wo_in`` / ``mlp_in`` / ``down_in``.
    """
    if x.dim() != 3 or x.shape[-1] != config.hidden:
        raise DimensionError(f"block input must be [B, T, {config.hidden}], got {tuple(x.shape)}")
    if x.shape[1] > config.max_seq_len:
        raise ContractError(f"sequence length {x.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tape is not None:
        block = watch_block_norms(tape, block)

    kind, eps = config.norm_kind, config.eps

    normed = block.ln1.apply(x, kind, eps)
    if observer is not None:
        observer("attn_in", normed)
    attn = _causal_attention(
        apply_linear(block.wq, normed),
        apply_linear(block.wk, normed),
        apply_linear(block.wv, normed),
        config.n_heads,
    )
    if observer is not None:
        observer("wo_in", attn)
    x = x + apply_linear(block.wo, attn)

    normed = block.ln2.apply(x, kind, eps)
    if observer is not None:
        observer("mlp_in", normed)
    hidden = gelu(apply_linear(block.w_up, normed))
    if observer is not None:
        observer("down_in", hidden)
    return x + apply_linear(block.w_down, hidden)


def check_tokens(tokens: Tensor, config: ModelConfig) -> Tensor:
    if tokens.dtype.is_floating_point or tokens.dim() != 2:
        raise InputError(f"tokens must be an integer tensor [B, T], got {tokens.dtype} {tuple(tokens.shape)}")
    if tokens.shape[1] > config.max_seq_len:
        raise ContractError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab_size):
        raise InputError(
            f"token ids must lie in [0, {config.vocab_size}), got range "
            f"[{int(tokens.min())}, {int(tokens.max())}]"
        )
    return tokens.long()


def embed(model: TransformerModel, tokens: Tensor) -> Tensor:
    tokens = check_tokens(tokens, model.config)
    return model.tok_emb[tokens] + model.pos_emb[: tokens.shape[1]]


def head(model: TransformerModel, hidden: Tensor) -> Tensor:
    normed = model.final_norm.apply(hidden, model.config.norm_kind, model.config.eps)
    return linear(normed, model.tok_emb)


def forward_from_embeddings(model: TransformerModel, x: Tensor, trace: Optional[BlockTrace] = None) -> Tensor:
    for block in model.blocks:
        out = block_forward(block, x, model.config)
        if trace is not None:
            trace.layers.append(BlockIO(x, out))
        x = out
    return head(model, x)


def forward(model: TransformerModel, tokens: Tensor) -> Tensor:
    return forward_from_embeddings(model, embed(model, tokens))


def forward_with_trace(model: TransformerModel, tokens: Tensor) -> Tuple[Tensor, BlockTrace]:
    trace = BlockTrace()
    logits = forward_from_embeddings(model, embed(model, tokens), trace)
    return logits, trace


class SamplingKind(str, Enum):
    GREEDY = "greedy"
    TEMPERATURE = "temperature"
    TOP_K = "top_k"


@dataclass
class SamplingPolicy:
    kind: SamplingKind = SamplingKind.GREEDY
    temperature: float = 1.0
    top_k: Optional[int] = None

    def __post_init__(self):
        self.kind = SamplingKind(self.kind)

    @classmethod
    def greedy(cls) -> "SamplingPolicy":
        return cls(SamplingKind.GREEDY)

    @classmethod
    def with_temperature(cls, temperature: float) -> "SamplingPolicy":
        return cls(SamplingKind.TEMPERATURE, temperature=temperature)

    @classmethod
    def with_top_k(cls, k: int, temperature: float = 1.0) -> "SamplingPolicy":
        return cls(SamplingKind.TOP_K, temperature=temperature, top_k=k)

    def choose(self, logits: Tensor, rng: Rng) -> int:
        # argmax ties resolve to the lowest token id
        if self.kind is SamplingKind.GREEDY or self.temperature <= 0:
            return int(torch.argmax(logits))
        scaled = logits.double() / self.temperature
        if self.kind is SamplingKind.TOP_K:
            k = min(int(self.top_k or 1), scaled.shape[-1])
            values, indices = torch.topk(scaled, k)
            return int(indices[rng.categorical(softmax(values, -1))])
        return rng.categorical(softmax(scaled, -1))


@torch.no_grad()
def sample(model: TransformerModel, prompt: Sequence[int], n_tokens: int, policy: SamplingPolicy, rng: Rng) -> List[int]:
    """Autoregressive continuation; returns prompt followed by the generated ids"""
    if len(prompt) == 0:
        raise ContractError("prompt must be non-empty")
    if n_tokens < 1:
        raise ContractError(f"n_tokens must be >= 1, got {n_tokens}")

    ids = [int(t) for t in prompt]
    window = model.config.max_seq_len
    for _ in range(n_tokens):
        context = torch.tensor([ids[-window:]], dtype=torch.long)
        logits = forward(model, context)[0, -1]
        ids.append(policy.choose(logits, rng))
    return ids
