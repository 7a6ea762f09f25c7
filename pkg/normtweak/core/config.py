"""
Run configuration: a JSON file overridden by command-line flags, validated as a whole.

Every output written by a run carries the provenance block returned by
``RunConfig.provenance()``.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog

from normtweak import ARTIFACT_VERSION
from normtweak.core.errors import ConfigValidationError, InputError
from normtweak.models.transformer import ModelConfig
from normtweak.services.calibration import CalibrationConfig, CalibrationSource
from normtweak.services.evaluation import EvalConfig
from normtweak.services.norm_tweaking import TweakConfig
from normtweak.services.quantization import QuantConfig, QuantMethod
from normtweak.services.training import TrainConfig

logger = structlog.get_logger()

COMMANDS = ("train", "gendata", "quantize", "tweak", "eval", "compare", "divergence")
MAX_SEED = 2 ** 64 - 1


@dataclass
class Settings:
    """Process-level settings taken from the environment"""

    log_level: str = "INFO"
    registry_enabled: bool = True

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            log_level=os.getenv("NORMTWEAK_LOG_LEVEL", cls.log_level),
            registry_enabled=os.getenv("NORMTWEAK_REGISTRY", "1") not in ("0", "false", "off"),
        )


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    quantizer: QuantMethod = QuantMethod.GPTQ
    model_path: Optional[str] = None
    other_model_path: Optional[str] = None
    corpus_path: Optional[str] = None
    calib_path: Optional[str] = None
    eval_paths: List[str] = field(default_factory=list)
    compare_models: Dict[str, str] = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    tweak: TweakConfig = field(default_factory=TweakConfig)
    calib: CalibrationConfig = field(default_factory=CalibrationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.quantizer = QuantMethod(self.quantizer)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        sections = {
            "model": ModelConfig,
            "quant": QuantConfig,
            "tweak": TweakConfig,
            "calib": CalibrationConfig,
            "train": TrainConfig,
            "eval": EvalConfig,
        }
        kwargs = dict(data)
        try:
            for name, section in sections.items():
                if name in kwargs:
                    kwargs[name] = section(**kwargs[name])
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise InputError(f"invalid run configuration: {e}") from e

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise InputError(f"config file not found: {path}") from e
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise InputError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise InputError(f"config file {path} must contain a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "out": self.out,
            "quantizer": self.quantizer.value,
            "model_path": self.model_path,
            "other_model_path": self.other_model_path,
            "corpus_path": self.corpus_path,
            "calib_path": self.calib_path,
            "eval_paths": list(self.eval_paths),
            "compare_models": dict(self.compare_models),
            "model": self.model.to_dict(),
            "quant": self.quant.to_dict(),
            "tweak": self.tweak.to_dict(),
            "calib": self.calib.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON; the output directory is not part of the identity"""
        payload = self.to_dict()
        payload.pop("out")
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def run_id(self) -> str:
        return self.config_hash()[:12]

    def provenance(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash(),
            "run_id": self.run_id,
            "artifact_version": ARTIFACT_VERSION,
        }

    def _required_paths(self, command: str) -> Dict[str, Optional[str]]:
        needs_calibration = command in ("quantize", "tweak", "divergence", "gendata")
        required = {}
        if command == "train":
            required["corpus_path"] = self.corpus_path
        if command in ("gendata", "quantize", "tweak", "eval", "divergence"):
            required["model_path"] = self.model_path
        if command == "divergence":
            required["other_model_path"] = self.other_model_path
        if command in ("eval", "compare"):
            if not self.eval_paths:
                required["eval_paths"] = None
        if command == "compare" and not self.compare_models and not self.model_path:
            required["compare_models"] = None
        if needs_calibration and not (self.calib_path and command != "gendata"):
            if self.calib.source is CalibrationSource.GAUSSIAN:
                required["calib.path or corpus_path"] = self.calib.path or self.corpus_path
            elif self.calib.whitelist is None:
                required["corpus_path (for the first-token whitelist)"] = self.corpus_path
        return required

    def validate(self, command: str) -> List[str]:
        """Every violation across sections and referenced paths"""
        violations = []
        if command not in COMMANDS:
            violations.append(f"unknown command {command!r}")
        if not 0 <= self.seed <= MAX_SEED:
            violations.append("seed must be an unsigned 64-bit integer")
        if not self.out:
            violations.append("out must name an output directory")

        hidden = self.model.hidden if command == "train" else None
        violations.extend(self.quant.validate(hidden))
        violations.extend(self.tweak.validate())
        violations.extend(self.calib.validate())
        violations.extend(self.train.validate())
        violations.extend(self.eval.validate())
        if command == "train":
            violations.extend(self.model.validate())

        for name, value in self._required_paths(command).items():
            if not value:
                violations.append(f"{name} is required for {command}")
        for name, value in self._existing_paths(command).items():
            if value and not Path(value).exists():
                violations.append(f"{name} does not exist: {value}")
        return violations

    def _existing_paths(self, command: str) -> Dict[str, Optional[str]]:
        paths = {
            "model_path": self.model_path,
            "other_model_path": self.other_model_path,
            "corpus_path": self.corpus_path,
            "calib.path": self.calib.path,
        }
        if command != "gendata":
            paths["calib_path"] = self.calib_path
        for index, path in enumerate(self.eval_paths):
            paths[f"eval_paths[{index}]"] = path
        for name, path in self.compare_models.items():
            paths[f"compare_models[{name}]"] = path
        return paths

    def check(self, command: str) -> "RunConfig":
        violations = self.validate(command)
        if violations:
            logger.error("Invalid run configuration", command=command, violations=len(violations))
            raise ConfigValidationError(violations)
        return self

    def summary(self) -> Dict[str, Any]:
        return {"run_id": self.run_id, "seed": self.seed, "quantizer": self.quantizer.value, "out": self.out}


def seed_from_string(value: str) -> int:
    seed = int(value, 0)
    if not 0 <= seed <= MAX_SEED:
        raise InputError(f"seed must be an unsigned 64-bit integer, got {value}")
    return seed
