"""
Measurement: sliding-window perplexity, final-token cloze accuracy,
per-layer activation divergence between two models, and comparison tables.
"""

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
import structlog
import torch
import torch.nn.functional as F

from normtweak.core.errors import ContractError
from normtweak.core.numerics import Rng, Tensor
from normtweak.models.checkpoint import atomic_write, dump_json
from normtweak.models.tokenizer import ByteTokenizer
from normtweak.models.transformer import (
    BlockTrace,
    SamplingPolicy,
    TransformerModel,
    forward,
    forward_from_embeddings,
    sample,
)
from normtweak.services.calibration import CalibrationSet
from normtweak.services.norm_tweaking import channel_stats, delta_mu, delta_var

logger = structlog.get_logger()

CSV_FLOAT_FORMAT = "%.4f"
TABLE_COLUMNS = ["method", "dataset", "ppl", "last_word_acc", "n_tokens"]

ClozeItem = Tuple[List[int], int]


@dataclass
class EvalConfig:
    stride: int = 0  # 0 means the model's max_seq_len
    n_cloze: int = 64
    cloze_context: int = 32

    def validate(self, max_seq_len: Optional[int] = None) -> List[str]:
        violations = []
        if self.stride < 0:
            violations.append("eval.stride must be non-negative")
        elif max_seq_len is not None and self.stride > max_seq_len:
            violations.append(f"eval.stride {self.stride} exceeds model max_seq_len {max_seq_len}")
        if self.n_cloze < 0:
            violations.append("eval.n_cloze must be non-negative")
        if self.cloze_context < 1:
            violations.append("eval.cloze_context must be positive")
        return violations

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class EvalResult:
    dataset: str
    ppl: Optional[float] = None
    last_word_acc: Optional[float] = None
    n_tokens: int = 0
    n_items: int = 0
    mean_nll: Optional[float] = None

    def merge(self, other: "EvalResult") -> "EvalResult":
        return EvalResult(
            dataset=self.dataset,
            ppl=self.ppl if self.ppl is not None else other.ppl,
            last_word_acc=self.last_word_acc if self.last_word_acc is not None else other.last_word_acc,
            n_tokens=self.n_tokens or other.n_tokens,
            n_items=self.n_items or other.n_items,
            mean_nll=self.mean_nll if self.mean_nll is not None else other.mean_nll,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@torch.no_grad()
def perplexity(model: TransformerModel, tokens: Tensor, stride: int = 0, dataset: str = "text") -> EvalResult:
    """exp(mean next-token NLL) with overlapping windows of max_seq_len advanced by ``stride``.

    Each window scores only the targets not already scored by an earlier
    window; no target is counted twice.
    """
    window = model.config.max_seq_len
    tokens = tokens.reshape(-1).long()
    n = tokens.numel()
    if n < window:
        raise ContractError(f"perplexity text has {n} tokens; need at least max_seq_len={window}")
    stride = stride or window
    if not 1 <= stride <= window:
        raise ContractError(f"stride must lie in [1, {window}], got {stride}")

    total_nll = 0.0
    scored = 0
    prev_end = 0
    for begin in range(0, n, stride):
        end = min(begin + window, n)
        ids = tokens[begin:end]
        new_targets = min(end - max(prev_end, begin + 1), ids.numel() - 1)
        if new_targets > 0:
            logits = forward(model, ids.unsqueeze(0))[0]
            log_probs = F.log_softmax(logits[:-1].double(), dim=-1)
            targets = ids[1:]
            nll = -log_probs[torch.arange(targets.numel()), targets]
            total_nll += float(nll[-new_targets:].sum())
            scored += new_targets
        prev_end = end
        if end == n:
            break

    mean_nll = total_nll / scored
    return EvalResult(dataset=dataset, ppl=math.exp(mean_nll), n_tokens=scored, mean_nll=mean_nll)


def make_cloze_items(tokens: Tensor, n_items: int, context_len: int, rng: Rng) -> List[ClozeItem]:
    """Random held-out windows whose final token is the cloze target"""
    tokens = tokens.reshape(-1).long()
    if tokens.numel() < context_len + 1:
        raise ContractError(f"need at least {context_len + 1} tokens to build cloze items")
    starts = rng.randint(tokens.numel() - context_len, (n_items,))
    return [
        (tokens[int(s): int(s) + context_len].tolist(), int(tokens[int(s) + context_len]))
        for s in starts
    ]


@torch.no_grad()
def last_word_accuracy(model: TransformerModel, items: Sequence[ClozeItem], dataset: str = "cloze") -> EvalResult:
    """Fraction of items whose greedy next-token prediction equals the target (ties go to the lowest id)"""
    if not items:
        raise ContractError("last_word_accuracy needs at least one item")
    window = model.config.max_seq_len
    hits = 0
    for context, target in items:
        if not context:
            raise ContractError("cloze context must be non-empty")
        logits = forward(model, torch.tensor([list(context)[-window:]], dtype=torch.long))[0, -1]
        hits += int(torch.argmax(logits)) == int(target)
    return EvalResult(dataset=dataset, last_word_acc=hits / len(items), n_items=len(items))


def evaluate(model: TransformerModel, tokens: Tensor, cfg: EvalConfig, rng: Rng, dataset: str = "text") -> EvalResult:
    result = perplexity(model, tokens, cfg.stride, dataset)
    if cfg.n_cloze > 0:
        items = make_cloze_items(tokens, cfg.n_cloze, min(cfg.cloze_context, model.config.max_seq_len), rng)
        result = result.merge(last_word_accuracy(model, items, dataset))
    logger.info("Evaluated model", dataset=dataset, ppl=round(result.ppl, 4), last_word_acc=result.last_word_acc)
    return result


@dataclass
class DivergenceReport:
    models: Tuple[str, str]
    batch: Dict[str, Any]
    delta_mu: List[float] = field(default_factory=list)
    delta_var: List[float] = field(default_factory=list)

    @property
    def mean_delta_mu(self) -> float:
        return sum(self.delta_mu) / len(self.delta_mu)

    @property
    def mean_delta_var(self) -> float:
        return sum(self.delta_var) / len(self.delta_var)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "models": list(self.models),
            "batch": self.batch,
            "layers": [
                {"layer": i, "delta_mu": mu, "delta_var": var}
                for i, (mu, var) in enumerate(zip(self.delta_mu, self.delta_var))
            ],
            "mean_delta_mu": self.mean_delta_mu,
            "mean_delta_var": self.mean_delta_var,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"# {self.models[0]} vs {self.models[1]}", f"{'layer':>5}  {'delta_mu':>12}  {'delta_var':>12}"]
        for i, (mu, var) in enumerate(zip(self.delta_mu, self.delta_var)):
            lines.append(f"{i:>5}  {mu:>12.6e}  {var:>12.6e}")
        return "\n".join(lines) + "\n"


@torch.no_grad()
def divergence_profile(
    float_model: TransformerModel,
    other_model: TransformerModel,
    batch: CalibrationSet,
    names: Tuple[str, str] = ("float", "quantized"),
) -> DivergenceReport:
    """Per-layer mean |mu_f - mu_q| and |var_f - var_q| of block outputs, each model along its own pipeline"""
    if float_model.config.to_dict() != other_model.config.to_dict():
        raise ContractError("divergence_profile needs two models with the same configuration")

    float_trace, other_trace = BlockTrace(), BlockTrace()
    forward_from_embeddings(float_model, batch.block0_input(float_model), float_trace)
    forward_from_embeddings(other_model, batch.block0_input(other_model), other_trace)

    report = DivergenceReport(models=tuple(names), batch=batch.describe())
    for f_io, q_io in zip(float_trace.layers, other_trace.layers):
        f_stats, q_stats = channel_stats(f_io.output), channel_stats(q_io.output)
        report.delta_mu.append(delta_mu(f_stats, q_stats))
        report.delta_var.append(delta_var(f_stats, q_stats))
    logger.info("Divergence profile", models=list(names), mean_delta_mu=round(report.mean_delta_mu, 6))
    return report


@dataclass
class ComparisonTable:
    frame: pd.DataFrame
    provenance: Dict[str, Any] = field(default_factory=dict)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        if self.provenance:
            buffer.write("# " + json.dumps(self.provenance, sort_keys=True) + "\n")
        self.frame.to_csv(buffer, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        return buffer.getvalue()

    def to_text(self) -> str:
        return self.frame.to_string(index=False, float_format=lambda v: CSV_FLOAT_FORMAT % v) + "\n"

    def write(self, out_dir: Union[str, Path], stem: str = "comparison") -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path, text_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
        atomic_write(csv_path, self.to_csv().encode("utf-8"))
        atomic_write(text_path, self.to_text().encode("utf-8"))
        return csv_path, text_path


def compare(
    methods: Sequence[Tuple[str, TransformerModel]],
    datasets: Sequence[Tuple[str, Tensor]],
    cfg: EvalConfig,
    rng: Rng,
    provenance: Optional[Dict[str, Any]] = None,
) -> ComparisonTable:
    """One row per (method, dataset); every method sees the same cloze items"""
    if not methods:
        raise ContractError("compare needs at least one method")
    if not datasets:
        raise ContractError("compare needs at least one dataset")

    rows = []
    for dataset, tokens in datasets:
        items = None
        if cfg.n_cloze > 0:
            context = min(cfg.cloze_context, methods[0][1].config.max_seq_len)
            items = make_cloze_items(tokens, cfg.n_cloze, context, rng.spawn(dataset))
        for name, model in methods:
            result = perplexity(model, tokens, cfg.stride, dataset)
            if items is not None:
                result = result.merge(last_word_accuracy(model, items, dataset))
            rows.append(
                {
                    "method": name,
                    "dataset": dataset,
                    "ppl": result.ppl,
                    "last_word_acc": result.last_word_acc if result.last_word_acc is not None else float("nan"),
                    "n_tokens": result.n_tokens,
                }
            )
            logger.info("Compared method", method=name, dataset=dataset, ppl=round(result.ppl, 4))
    return ComparisonTable(pd.DataFrame(rows, columns=TABLE_COLUMNS), provenance or {})


def continue_text(
    models: Sequence[Tuple[str, TransformerModel]],
    prompt: str,
    n_tokens: int,
    policy: SamplingPolicy,
    rng: Rng,
) -> Dict[str, str]:
    """Byte-level continuations of ``prompt`` from each model, each with the same sampling substream"""
    tokenizer = ByteTokenizer()
    prompt_ids = tokenizer.encode(prompt)
    outputs = {}
    for name, model in models:
        ids = sample(model, prompt_ids, n_tokens, policy, rng.spawn("continue"))
        outputs[name] = tokenizer.decode(ids)
    return outputs


def write_eval_results(results: Sequence[EvalResult], path: Union[str, Path], provenance: Dict[str, Any]) -> Path:
    path = Path(path)
    atomic_write(path, dump_json({"provenance": provenance, "results": [r.to_dict() for r in results]}))
    return path
