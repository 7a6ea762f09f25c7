"""
Dense tensor math and a restricted gradient tape.

Tensors are plain CPU ``torch.Tensor`` values. Differentiation is limited to
an explicit watch-set: ``GradTape.watch`` hands out detached leaf copies and
only those ever receive gradients, so every weight reaching a recorded
computation behaves as a constant.
"""

import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
import torch
import torch.nn.functional as F

from normtweak.core.errors import ContractError, DimensionError, NumericError

logger = structlog.get_logger()

Tensor = torch.Tensor
Shape = Union[int, Sequence[int]]


def _check_axis(x: Tensor, axis: int) -> int:
    ndim = x.dim()
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for tensor of shape {tuple(x.shape)}")
    return axis % ndim


def assert_finite(x: Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"{what} contains non-finite values")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes of ``a`` broadcast)"""
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """Apply an ``[out x in]`` weight to the last axis of ``x``"""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    return torch.matmul(x, weight.t())


def layernorm_forward(x: Tensor, gamma: Tensor, beta: Optional[Tensor], eps: float) -> Tensor:
    """Normalize over the last axis with the population variance, then scale and shift"""
    hidden = gamma.shape[-1]
    if x.shape[-1] != hidden or (beta is not None and beta.shape[-1] != hidden):
        raise DimensionError(
            f"layernorm expects last dim {hidden}, got input {tuple(x.shape)}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered * torch.rsqrt(var + eps) * gamma
    if beta is not None:
        out = out + beta
    return out


def rmsnorm_forward(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"rmsnorm expects last dim {gamma.shape[-1]}, got input {tuple(x.shape)}")
    mean_square = (x * x).mean(dim=-1, keepdim=True)
    return x * torch.rsqrt(mean_square + eps) * gamma


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # torch subtracts the axis max before exponentiating
    return torch.softmax(x, dim=_check_axis(x, axis))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=_check_axis(x, axis))


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x, approximate="tanh")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        return torch.add(a, b)
    except RuntimeError as e:
        raise DimensionError(f"cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from e


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        return torch.mul(a, b)
    except RuntimeError as e:
        raise DimensionError(f"cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from e


def transpose(x: Tensor, axis0: int = -2, axis1: int = -1) -> Tensor:
    return x.transpose(_check_axis(x, axis0), _check_axis(x, axis1))


def reshape(x: Tensor, shape: Shape) -> Tensor:
    try:
        return x.reshape(shape)
    except RuntimeError as e:
        raise DimensionError(f"cannot reshape {tuple(x.shape)} to {shape}") from e


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdim: bool = False) -> Tensor:
    if axis is None:
        return x.mean()
    return x.mean(dim=_check_axis(x, axis), keepdim=keepdim)


def reduce_var(x: Tensor, axis: Optional[int] = None, keepdim: bool = False) -> Tensor:
    """Population (divide-by-n) variance"""
    if axis is None:
        return x.var(correction=0)
    return x.var(dim=_check_axis(x, axis), correction=0, keepdim=keepdim)


class GradTape:
    """Scope in which computations on watched parameters are recorded.

    Usage::

        with GradTape() as tape:
            gamma = tape.watch("ln.gamma", block_gamma)
            loss = some_function(gamma)
            grads = backward(tape, loss)
    """

    def __init__(self):
        self.watched: Dict[str, Tensor] = {}
        self.active = False
        self._grad_mode = None

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.watched:
            return self.watched[name]
        leaf = tensor.detach().clone().requires_grad_(True)
        self.watched[name] = leaf
        return leaf

    def __enter__(self) -> "GradTape":
        self._grad_mode = torch.enable_grad()
        self._grad_mode.__enter__()
        self.active = True
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        self.active = False
        self._grad_mode.__exit__(exc_type, exc, tb)
        return False


def backward(tape: GradTape, loss: Tensor) -> Dict[str, Tensor]:
    """Return d(loss)/d(p) for every watched parameter, keyed by watch name"""
    if loss.numel() != 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not tape.watched:
        raise ContractError("gradient tape has no watched parameters")
    if loss.grad_fn is None:
        raise ContractError("gradient tape is empty: loss was not recorded from any watched parameter")

    names = list(tape.watched)
    grads = torch.autograd.grad(
        loss.reshape(()),
        [tape.watched[name] for name in names],
        allow_unused=True,
    )
    return {
        name: torch.zeros_like(tape.watched[name]) if grad is None else grad.detach()
        for name, grad in zip(names, grads)
    }


@dataclass
class Rng:
    """Seeded random stream; (seed, key) fully determines every substream"""

    seed: int
    generator: torch.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def spawn(self, key: Union[str, int]) -> "Rng":
        key_int = key if isinstance(key, int) else zlib.crc32(key.encode("utf-8"))
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(key_int),))
        return Rng(int(sequence.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, shape: Tuple[int, ...], std: float = 1.0, dtype: torch.dtype = torch.float32) -> Tensor:
        return torch.randn(shape, generator=self.generator, dtype=dtype) * std

    def randint(self, high: int, size: Tuple[int, ...] = (), low: int = 0) -> Tensor:
        return torch.randint(low, high, size, generator=self.generator)

    def categorical(self, probs: Tensor) -> int:
        return int(torch.multinomial(probs, 1, generator=self.generator).item())
