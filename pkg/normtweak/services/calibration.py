"""
Calibration-set construction.

Three sources feed the quantization pipeline:

* ``generated``: the float model writes its own calibration text. The first
  token of every sample is drawn from a whitelist of the tokens dominating the
  training corpus, a short stochastic prefix follows, and a deterministic
  continuation fills the rest of the sequence.
* ``real``: random contiguous windows of a user-supplied corpus.
* ``gaussian``: activations drawn from a Gaussian with the per-channel
  mean/variance of real embeddings, injected directly at the first block.
"""

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
import torch
from joblib import Parallel, delayed

from normtweak.core.errors import ConfigValidationError, ContractError, DimensionError, FormatError, InputError
from normtweak.core.numerics import Rng, Tensor
from normtweak.models.checkpoint import atomic_write, dump_json
from normtweak.models.tokenizer import load_corpus
from normtweak.models.transformer import SamplingKind, SamplingPolicy, TransformerModel, embed, sample
from normtweak.services.norm_tweaking import ActivationStats, channel_stats

logger = structlog.get_logger()

PathLike = Union[str, Path]


class CalibrationSource(str, Enum):
    GENERATED = "generated"
    REAL = "real"
    GAUSSIAN = "gaussian"


def parse_source(value: str) -> Tuple[CalibrationSource, Optional[str]]:
    """``generated`` | ``real:<path>`` | ``gaussian``"""
    if value.startswith("real:"):
        path = value[len("real:"):]
        if not path:
            raise InputError("--calib real:<path> needs a path")
        return CalibrationSource.REAL, path
    try:
        return CalibrationSource(value), None
    except ValueError as e:
        raise InputError(f"unknown calibration source {value!r}; use generated, real:<path> or gaussian") from e


@dataclass
class CalibrationConfig:
    n_samples: int = 16
    token_length: int = 128
    source: CalibrationSource = CalibrationSource.GENERATED
    path: Optional[str] = None
    whitelist: Optional[List[int]] = None
    whitelist_fraction: float = 0.9
    stage1_len: int = 4
    stage1_temperature: float = 1.0
    stage2_policy: SamplingKind = SamplingKind.GREEDY
    stage2_top_k: Optional[int] = None
    n_jobs: int = 1

    def __post_init__(self):
        self.source = CalibrationSource(self.source)
        self.stage2_policy = SamplingKind(self.stage2_policy)

    @property
    def stage1(self) -> SamplingPolicy:
        return SamplingPolicy.with_temperature(self.stage1_temperature)

    @property
    def stage2(self) -> SamplingPolicy:
        if self.stage2_policy is SamplingKind.TOP_K:
            return SamplingPolicy.with_top_k(self.stage2_top_k or 1)
        if self.stage2_policy is SamplingKind.TEMPERATURE:
            return SamplingPolicy.with_temperature(self.stage1_temperature)
        return SamplingPolicy.greedy()

    def validate(self, max_seq_len: Optional[int] = None, vocab_size: Optional[int] = None) -> List[str]:
        violations = []
        if self.n_samples < 1:
            violations.append("calib.n_samples must be positive")
        if self.token_length < 1:
            violations.append("calib.token_length must be positive")
        elif max_seq_len is not None and self.token_length > max_seq_len:
            violations.append(f"calib.token_length {self.token_length} exceeds model max_seq_len {max_seq_len}")
        if self.stage1_len < 1:
            violations.append("calib.stage1_len must be positive")
        if self.source is CalibrationSource.REAL and not self.path:
            violations.append("calib.path is required for the real source")
        if self.whitelist is not None:
            if not self.whitelist:
                violations.append("calib.whitelist must be non-empty")
            elif vocab_size is not None and any(not 0 <= t < vocab_size for t in self.whitelist):
                violations.append(f"calib.whitelist ids must lie in [0, {vocab_size})")
        if not 0.0 < self.whitelist_fraction <= 1.0:
            violations.append("calib.whitelist_fraction must lie in (0, 1]")
        if self.stage2_policy is SamplingKind.TOP_K and (self.stage2_top_k is None or self.stage2_top_k < 1):
            violations.append("calib.stage2_top_k must be a positive integer for the top_k policy")
        if self.n_jobs == 0:
            violations.append("calib.n_jobs must be non-zero")
        return violations

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["source"] = self.source.value
        data["stage2_policy"] = self.stage2_policy.value
        return data


@dataclass
class CalibrationSet:
    """Either token sequences ``[n, T]`` or pre-embedded block-0 activations ``[n, T, h]``"""

    source: CalibrationSource
    seed: int
    tokens: Optional[Tensor] = None
    embeddings: Optional[Tensor] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.source = CalibrationSource(self.source)
        if (self.tokens is None) == (self.embeddings is None):
            raise ContractError("a calibration set holds exactly one of tokens or embeddings")

    @property
    def data(self) -> Tensor:
        return self.tokens if self.tokens is not None else self.embeddings

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def token_length(self) -> int:
        return self.data.shape[1]

    @property
    def sequences(self) -> List[List[int]]:
        if self.tokens is None:
            raise ContractError("gaussian calibration sets carry no token sequences")
        return self.tokens.tolist()

    def block0_input(self, model: TransformerModel) -> Tensor:
        if self.n_samples == 0:
            raise ContractError("calibration set is empty")
        if self.tokens is not None:
            return embed(model, self.tokens)
        if self.embeddings.shape[-1] != model.config.hidden:
            raise DimensionError(
                f"calibration activations have {self.embeddings.shape[-1]} channels, model hidden is {model.config.hidden}"
            )
        return self.embeddings.to(model.dtype)

    def describe(self) -> Dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "token_length": self.token_length,
            "source": self.source.value,
            "seed": self.seed,
        }


def build_whitelist(corpus: Sequence[int], top_fraction: float = 0.9) -> List[int]:
    """Smallest set of most frequent tokens covering ``top_fraction`` of the corpus; ties go to the lower id"""
    if not 0.0 < top_fraction <= 1.0:
        raise ContractError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    ids = np.asarray(corpus, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ContractError("cannot build a whitelist from an empty corpus")

    counts = np.bincount(ids)
    present = np.flatnonzero(counts)
    order = present[np.lexsort((present, -counts[present]))]
    cumulative = np.cumsum(counts[order])
    needed = top_fraction * ids.size
    # tolerate float rounding in top_fraction * size
    k = int(np.searchsorted(cumulative, needed - 1e-9 * ids.size, side="left")) + 1
    return sorted(int(t) for t in order[: min(k, order.size)])


def _generate_one(model: TransformerModel, cfg: CalibrationConfig, whitelist: List[int], rng: Rng) -> List[int]:
    first = whitelist[int(rng.randint(len(whitelist)))]
    ids = [first]
    stage1_tokens = min(cfg.stage1_len, cfg.token_length) - 1
    if stage1_tokens > 0:
        ids = sample(model, ids, stage1_tokens, cfg.stage1, rng)
    remaining = cfg.token_length - len(ids)
    if remaining > 0:
        ids = sample(model, ids, remaining, cfg.stage2, rng)
    return ids


def generate_calibration(model: TransformerModel, cfg: CalibrationConfig, rng: Rng) -> CalibrationSet:
    """Two-stage self-generated calibration text; sample i uses the substream ``rng.spawn(i)``"""
    config = model.config
    violations = cfg.validate(config.max_seq_len, config.vocab_size)
    if cfg.whitelist is None:
        violations.append("calib.whitelist is required for the generated source")
    if violations:
        raise ConfigValidationError(violations)

    whitelist = sorted(set(int(t) for t in cfg.whitelist))
    logger.info(
        "Generating calibration data",
        n_samples=cfg.n_samples,
        token_length=cfg.token_length,
        whitelist_size=len(whitelist),
        n_jobs=cfg.n_jobs,
    )
    sequences = Parallel(n_jobs=cfg.n_jobs, prefer="threads")(
        delayed(_generate_one)(model, cfg, whitelist, rng.spawn(i)) for i in range(cfg.n_samples)
    )
    tokens = torch.tensor(sequences, dtype=torch.long)
    return CalibrationSet(
        source=CalibrationSource.GENERATED,
        seed=rng.seed,
        tokens=tokens,
        provenance={"whitelist_size": len(whitelist), "stage1_len": cfg.stage1_len},
    )


def load_real(path: PathLike, cfg: CalibrationConfig, rng: Rng) -> CalibrationSet:
    """``n_samples`` random windows of ``token_length`` tokens lying wholly inside the file"""
    corpus = load_corpus(path)
    if corpus.numel() < cfg.token_length:
        raise InputError(f"{path} holds {corpus.numel()} tokens, fewer than token_length {cfg.token_length}")
    starts = rng.randint(corpus.numel() - cfg.token_length + 1, (cfg.n_samples,))
    tokens = torch.stack([corpus[int(s): int(s) + cfg.token_length] for s in starts])
    logger.info("Loaded real calibration windows", path=str(path), n_samples=cfg.n_samples)
    return CalibrationSet(source=CalibrationSource.REAL, seed=rng.seed, tokens=tokens, provenance={"path": str(path)})


def embedding_stats(model: TransformerModel, calib: CalibrationSet) -> ActivationStats:
    with torch.no_grad():
        return channel_stats(calib.block0_input(model), expected_channels=model.config.hidden)


def random_gaussian(reference: ActivationStats, cfg: CalibrationConfig, rng: Rng) -> CalibrationSet:
    """Block-0 activations drawn per channel from N(mu, var) of the reference"""
    noise = rng.normal((cfg.n_samples, cfg.token_length, reference.channels), 1.0, reference.mu.dtype)
    embeddings = reference.mu + noise * torch.sqrt(reference.var.clamp(min=0))
    return CalibrationSet(source=CalibrationSource.GAUSSIAN, seed=rng.seed, embeddings=embeddings)


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_calibration(calib: CalibrationSet, path: PathLike, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """u16 token ids (f32 activations for gaussian sets) plus a JSON sidecar"""
    path = Path(path)
    meta = calib.describe()
    if calib.tokens is not None:
        meta["dtype"] = "u16"
        payload = calib.tokens.numpy().astype("<u2").tobytes()
    else:
        meta["dtype"] = "f32"
        meta["hidden"] = calib.embeddings.shape[-1]
        payload = calib.embeddings.numpy().astype("<f4").tobytes()
    meta["provenance"] = {**calib.provenance, **(provenance or {})}
    atomic_write(path, payload)
    atomic_write(sidecar_path(path), dump_json(meta))
    logger.info("Saved calibration set", path=str(path), **calib.describe())
    return path


def load_calibration(path: PathLike) -> CalibrationSet:
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing calibration file: {e.filename}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"calibration sidecar is not valid JSON: {e}") from e

    try:
        n, length, dtype = int(meta["n_samples"]), int(meta["token_length"]), meta.get("dtype", "u16")
        shape = (n, length) if dtype == "u16" else (n, length, int(meta["hidden"]))
        source, seed = CalibrationSource(meta["source"]), int(meta["seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"calibration sidecar is missing fields: {e}") from e

    np_dtype = np.dtype("<u2") if dtype == "u16" else np.dtype("<f4")
    expected = int(np.prod(shape)) * np_dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path.name} holds {len(raw)} bytes, sidecar shape {list(shape)} needs {expected}")
    array = np.frombuffer(raw, dtype=np_dtype).reshape(shape)
    provenance = meta.get("provenance", {})
    if dtype == "u16":
        return CalibrationSet(source, seed, tokens=torch.from_numpy(array.astype(np.int64)), provenance=provenance)
    return CalibrationSet(source, seed, embeddings=torch.from_numpy(array.astype(np.float32)), provenance=provenance)
