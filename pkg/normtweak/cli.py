"""
Command-line front end: train, gendata, quantize, tweak, eval, compare, divergence.

Results go to ``--out`` (and a one-line JSON summary to stdout); logs go to
stderr. Failures print a single ``error=<Class> message="..."`` line on stderr.
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import structlog
import torch

from normtweak import __version__
from normtweak.core.config import RunConfig, Settings, seed_from_string
from normtweak.core.errors import ArgumentError, InputError, NormTweakError
from normtweak.core.logging import configure_logging
from normtweak.core.numerics import Rng
from normtweak.models.checkpoint import atomic_write, dump_json, load_checkpoint, read_provenance, save_checkpoint
from normtweak.models.tokenizer import load_corpus
from normtweak.models.transformer import TransformerModel, init_model
from normtweak.services.calibration import (
    CalibrationSet,
    CalibrationSource,
    build_whitelist,
    embedding_stats,
    generate_calibration,
    load_calibration,
    load_real,
    parse_source,
    random_gaussian,
    save_calibration,
)
from normtweak.services.evaluation import compare, divergence_profile, evaluate, write_eval_results
from normtweak.services.norm_tweaking import DEFAULT_LR_GRID, LossKind, ReferenceInput, TweakResult, tweak_model
from normtweak.services.quantization import QuantMethod
from normtweak.services.run_registry import RunRegistry
from normtweak.services.training import train_toy

logger = structlog.get_logger()

CommandResult = Tuple[Dict[str, Any], List[Dict[str, Any]]]

MODEL_DIR = "model"
CALIB_FILE = "calib.bin"


class CommandLineParser(argparse.ArgumentParser):
    """Raises instead of printing usage, so rejected flags surface as one error line"""

    def error(self, message: str):
        raise ArgumentError(f"{self.prog}: {message}")


def _shared_flags() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration; flags override its values")
    shared.add_argument("--seed", type=seed_from_string, help="u64 run seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--bits", type=int, help="weight bits: 2, 3, 4, 8, or 16 for passthrough")
    shared.add_argument("--group-size", type=int, help="group size along the input dim (default per-channel)")
    shared.add_argument("--act-bits", type=int, help="activation bits (8) for W*A8 modes")
    shared.add_argument("--alpha", type=float, help="SmoothQuant migration strength")
    shared.add_argument("--quantizer", choices=[m.value for m in QuantMethod])
    shared.add_argument("--loss", choices=[k.value for k in LossKind])
    shared.add_argument("--iters", type=int, help="tweaking passes per layer (0 = plain quantization)")
    shared.add_argument("--lr0", type=float)
    shared.add_argument("--lr-scale", type=float)
    shared.add_argument("--lr-search", help="comma-separated lr_0 grid, or 'default'")
    shared.add_argument("--reference-input", choices=[r.value for r in ReferenceInput])
    shared.add_argument("--calib", help="generated | real:<path> | gaussian")
    shared.add_argument("--calib-file", help="saved calibration set to reuse")
    shared.add_argument("--n-samples", type=int)
    shared.add_argument("--token-length", type=int)
    shared.add_argument("--model", help="float (or input) checkpoint directory")
    shared.add_argument("--other", help="second checkpoint directory (divergence)")
    shared.add_argument("--corpus", help="training corpus (u16 token file or UTF-8 text)")
    shared.add_argument("--eval", action="append", help="evaluation text; repeatable")
    shared.add_argument("--method", action="append", help="NAME=CHECKPOINT for compare; repeatable")
    shared.add_argument("--steps", type=int, help="training steps")
    shared.add_argument("--stride", type=int, help="perplexity window stride")
    shared.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    return shared


def build_parser() -> argparse.ArgumentParser:
    parser = CommandLineParser(prog="normtweak", description="Norm-Tweaking post-training quantization")
    parser.add_argument("--version", action="version", version=f"normtweak {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    shared = _shared_flags()
    for name, help_text in (
        ("train", "train a toy float model on a corpus"),
        ("gendata", "build and save a calibration set"),
        ("quantize", "quantize a float checkpoint without tweaking"),
        ("tweak", "quantize with norm tweaking"),
        ("eval", "perplexity and last-word accuracy of a checkpoint"),
        ("compare", "side-by-side table for several checkpoints"),
        ("divergence", "per-layer activation divergence between two checkpoints"),
    ):
        commands.add_parser(name, parents=[shared], help=help_text)
    return parser


def _parse_lr_search(value: str) -> List[float]:
    if value == "default":
        return list(DEFAULT_LR_GRID)
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise InputError(f"--lr-search expects comma-separated numbers, got {value!r}") from e


def _parse_methods(values: Sequence[str]) -> Dict[str, str]:
    methods = {}
    for value in values:
        name, sep, path = value.partition("=")
        if not sep or not name or not path:
            raise InputError(f"--method expects NAME=CHECKPOINT, got {value!r}")
        methods[name] = path
    return methods


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file values, then flag overrides"""
    config = RunConfig.from_json(args.config) if args.config else RunConfig()

    top_level = {
        "seed": args.seed,
        "out": args.out,
        "model_path": args.model,
        "other_model_path": args.other,
        "corpus_path": args.corpus,
        "calib_path": args.calib_file,
    }
    for name, value in top_level.items():
        if value is not None:
            setattr(config, name, value)
    if args.quantizer is not None:
        config.quantizer = QuantMethod(args.quantizer)
    if args.eval:
        config.eval_paths = list(args.eval)
    if args.method:
        config.compare_models = _parse_methods(args.method)

    sections = (
        (config.quant, {"bits": args.bits, "group_size": args.group_size, "act_bits": args.act_bits, "smooth_alpha": args.alpha}),
        (config.tweak, {"iters": args.iters, "lr_0": args.lr0, "scale": args.lr_scale}),
        (config.calib, {"n_samples": args.n_samples, "token_length": args.token_length}),
        (config.train, {"steps": args.steps}),
        (config.eval, {"stride": args.stride}),
    )
    for section, overrides in sections:
        for name, value in overrides.items():
            if value is not None:
                setattr(section, name, value)

    if args.loss is not None:
        config.tweak.loss_kind = LossKind(args.loss)
    if args.reference_input is not None:
        config.tweak.reference_input = ReferenceInput(args.reference_input)
    if args.lr_search is not None:
        config.tweak.lr_search = _parse_lr_search(args.lr_search)
    if args.calib is not None:
        source, path = parse_source(args.calib)
        config.calib.source = source
        if path is not None:
            config.calib.path = path
    return config


def command_rng(config: RunConfig, command: str) -> Rng:
    """Every command draws from its own named substream of the run seed"""
    return Rng(config.seed).spawn(command)


def resolve_calibration(config: RunConfig, model: TransformerModel, rng: Rng, use_saved: bool = True) -> CalibrationSet:
    if use_saved and config.calib_path:
        return load_calibration(config.calib_path)

    cfg = config.calib
    if cfg.source is CalibrationSource.REAL:
        return load_real(cfg.path, cfg, rng.spawn("real"))
    if cfg.source is CalibrationSource.GAUSSIAN:
        reference = load_real(cfg.path or config.corpus_path, cfg, rng.spawn("real"))
        return random_gaussian(embedding_stats(model, reference), cfg, rng.spawn("gaussian"))
    if cfg.whitelist is None:
        whitelist = build_whitelist(load_corpus(config.corpus_path).tolist(), cfg.whitelist_fraction)
        cfg = replace(cfg, whitelist=whitelist)
    return generate_calibration(model, cfg, rng.spawn("generated"))


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    atomic_write(path, dump_json(payload))
    return path


def cmd_train(config: RunConfig) -> CommandResult:
    rng = command_rng(config, "train")
    corpus = load_corpus(config.corpus_path)
    model = init_model(config.model, rng.spawn("init"))
    result = train_toy(model, corpus, config.train, rng.spawn("steps"))

    out = Path(config.out)
    provenance = config.provenance()
    save_checkpoint(result.model, out / MODEL_DIR, provenance)
    _write_json(out / "train_report.json", {"provenance": provenance, "losses": result.losses})
    metrics = {"steps": len(result.losses)}
    if result.losses:
        metrics.update(first_loss=result.losses[0], last_loss=result.losses[-1])
    return metrics, []


def cmd_gendata(config: RunConfig) -> CommandResult:
    rng = command_rng(config, "gendata")
    model = load_checkpoint(config.model_path)
    calib = resolve_calibration(config, model, rng, use_saved=False)
    save_calibration(calib, Path(config.out) / CALIB_FILE, config.provenance())
    return calib.describe(), []


def _run_pipeline(config: RunConfig, command: str, iters: Optional[int]) -> Tuple[TweakResult, Dict[str, Any]]:
    rng = command_rng(config, command)
    model = load_checkpoint(config.model_path)
    calib = resolve_calibration(config, model, rng)
    tcfg = config.tweak if iters is None else replace(config.tweak, iters=iters)
    result = tweak_model(model, config.quantizer, calib, config.quant, tcfg)

    out = Path(config.out)
    provenance = config.provenance()
    save_checkpoint(result.model, out / MODEL_DIR, provenance)
    report = {
        "provenance": provenance,
        "source_model": read_provenance(config.model_path),
        "calibration": calib.describe(),
        **result.report.to_dict(),
    }
    _write_json(out / f"{command}_report.json", report)
    return result, report


def cmd_quantize(config: RunConfig) -> CommandResult:
    result, _ = _run_pipeline(config, "quantize", iters=0)
    return {"layers": len(result.report.layers)}, result.report.timings()


def cmd_tweak(config: RunConfig) -> CommandResult:
    result, _ = _run_pipeline(config, "tweak", iters=None)
    layers = result.report.layers
    metrics = {
        "layers": len(layers),
        "skipped_layers": sum(layer.skipped for layer in layers),
        "mean_post_loss": sum(layer.post_loss for layer in layers) / len(layers),
    }
    return metrics, result.report.timings()


def cmd_eval(config: RunConfig) -> CommandResult:
    rng = command_rng(config, "eval")
    model = load_checkpoint(config.model_path)
    results = []
    for path in config.eval_paths:
        dataset = Path(path).stem
        results.append(evaluate(model, load_corpus(path), config.eval, rng.spawn(dataset), dataset))

    provenance = {**config.provenance(), "model": read_provenance(config.model_path)}
    write_eval_results(results, Path(config.out) / "eval.json", provenance)
    return {r.dataset: r.ppl for r in results}, []


def cmd_compare(config: RunConfig) -> CommandResult:
    rng = command_rng(config, "compare")
    methods = []
    if config.model_path and "float" not in config.compare_models:
        methods.append(("float", load_checkpoint(config.model_path)))
    methods.extend((name, load_checkpoint(path)) for name, path in config.compare_models.items())
    datasets = [(Path(path).stem, load_corpus(path)) for path in config.eval_paths]

    table = compare(methods, datasets, config.eval, rng, config.provenance())
    table.write(config.out)
    return {"rows": len(table.frame)}, []


def cmd_divergence(config: RunConfig) -> CommandResult:
    rng = command_rng(config, "divergence")
    float_model = load_checkpoint(config.model_path)
    other_model = load_checkpoint(config.other_model_path)
    calib = resolve_calibration(config, float_model, rng)
    names = (Path(config.model_path).name, Path(config.other_model_path).name)
    report = divergence_profile(float_model, other_model, calib, names)

    out = Path(config.out)
    provenance = config.provenance()
    _write_json(out / "divergence.json", {"provenance": provenance, **report.to_dict()})
    text = "# " + json.dumps(provenance, sort_keys=True) + "\n" + report.to_text()
    atomic_write(out / "divergence.txt", text.encode("utf-8"))
    return {"mean_delta_mu": report.mean_delta_mu}, []


COMMANDS: Dict[str, Callable[[RunConfig], CommandResult]] = {
    "train": cmd_train,
    "gendata": cmd_gendata,
    "quantize": cmd_quantize,
    "tweak": cmd_tweak,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "divergence": cmd_divergence,
}


def format_error(error: BaseException) -> str:
    return f"error={type(error).__name__} message={json.dumps(str(error))}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ArgumentError as e:
        print(format_error(e), file=sys.stderr)
        return 2
    settings = Settings.from_env()
    configure_logging(args.log_level or settings.log_level)
    torch.use_deterministic_algorithms(True)

    registry = RunRegistry(enabled=settings.registry_enabled)
    record_id = None
    started = time.perf_counter()
    try:
        config = load_run_config(args).check(args.command)
        record_id = registry.start(config, args.command)
        logger.info("Running command", command=args.command, **config.summary())
        metrics, timings = COMMANDS[args.command](config)
        registry.finish(record_id, "succeeded", started, metrics, timings)
        print(json.dumps({"command": args.command, "run_id": config.run_id, "out": config.out, **metrics}, sort_keys=True))
        logger.info("✅ Command finished", command=args.command, seconds=round(time.perf_counter() - started, 3))
        return 0
    except NormTweakError as e:
        registry.finish(record_id, "failed", started, error=str(e))
        print(format_error(e), file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"Unexpected failure: {str(e)}", command=args.command)
        registry.finish(record_id, "failed", started, error=str(e))
        print(format_error(e), file=sys.stderr)
        return 1
