"""
Checkpoint codec: ``manifest.json`` + ``weights.bin`` (+ ``config.json``) per directory.

Float tensors are stored as little-endian f32. Quantized Linear layers store
their codes as signed 8-bit integers regardless of bit width (the width is
recorded in the manifest) and their scales as f32.
"""

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import structlog
import torch

from normtweak.core.errors import FormatError
from normtweak.models.quantized import QuantizedLinear
from normtweak.models.transformer import (
    LINEAR_NAMES,
    ModelConfig,
    NormKind,
    NormParams,
    TransformerBlock,
    TransformerModel,
)

logger = structlog.get_logger()

MANIFEST_FILE = "manifest.json"
BLOB_FILE = "weights.bin"
CONFIG_FILE = "config.json"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "i8": np.dtype("i1"),
}

PathLike = Union[str, Path]


def atomic_write(path: Path, payload: bytes) -> None:
    """Write via a temporary sibling file and rename into place"""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def dump_json(payload: Any) -> bytes:
    return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _encode(tensor: torch.Tensor, dtype_code: str) -> bytes:
    return tensor.detach().cpu().numpy().astype(_DTYPES[dtype_code]).tobytes()


def save_checkpoint(model: TransformerModel, path: PathLike, provenance: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0

    for name, value in model.named_tensors():
        if isinstance(value, QuantizedLinear):
            extra = {"bits": value.bits, "group_size": value.group_size, "act_bits": value.act_bits}
            items = [(f"{name}.codes", value.codes, "i8", extra), (f"{name}.scales", value.scales, "f32", extra)]
        else:
            items = [(name, value, "f32", {})]

        for tensor_name, tensor, dtype_code, extra in items:
            raw = _encode(tensor, dtype_code)
            entries.append(
                {
                    "name": tensor_name,
                    "shape": list(tensor.shape),
                    "dtype": dtype_code,
                    "offset": offset,
                    "length": len(raw),
                    **extra,
                }
            )
            chunks.append(raw)
            offset += len(raw)

    atomic_write(path / BLOB_FILE, b"".join(chunks))
    atomic_write(path / MANIFEST_FILE, dump_json(entries))
    atomic_write(path / CONFIG_FILE, dump_json({"model": model.config.to_dict(), "provenance": provenance or {}}))
    logger.info("Saved checkpoint", path=str(path), tensors=len(entries), bytes=offset)
    return path


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise FormatError(f"missing checkpoint file {path.name} in {path.parent}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path.name} is not valid JSON: {e}") from e


def _decode_entries(manifest: Any, blob: bytes) -> Dict[str, Tuple[torch.Tensor, Dict[str, Any]]]:
    if not isinstance(manifest, list):
        raise FormatError("manifest.json must contain an array of tensor entries")

    tensors = {}
    for entry in manifest:
        name = entry.get("name", "<unnamed>") if isinstance(entry, dict) else "<invalid entry>"
        try:
            shape = [int(d) for d in entry["shape"]]
            dtype = _DTYPES[entry["dtype"]]
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"tensor {name}: malformed manifest entry ({e})") from e

        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count * dtype.itemsize != length:
            raise FormatError(
                f"tensor {name}: shape {shape} needs {count * dtype.itemsize} bytes "
                f"but manifest length is {length}"
            )
        if offset < 0 or offset + length > len(blob):
            raise FormatError(
                f"tensor {name}: bytes [{offset}, {offset + length}) exceed weights.bin size {len(blob)}"
            )
        array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        tensors[name] = (torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=True)), entry)
    return tensors


class _Assembler:
    def __init__(self, config: ModelConfig, tensors: Dict[str, Tuple[torch.Tensor, Dict[str, Any]]]):
        self.config = config
        self.tensors = tensors

    def tensor(self, name: str, shape: Tuple[int, ...]) -> torch.Tensor:
        if name not in self.tensors:
            raise FormatError(f"tensor {name}: missing from manifest")
        value = self.tensors[name][0]
        if tuple(value.shape) != tuple(shape):
            raise FormatError(f"tensor {name}: expected shape {list(shape)}, found {list(value.shape)}")
        return value

    def linear(self, name: str, shape: Tuple[int, int]):
        codes_name = f"{name}.codes"
        if codes_name not in self.tensors:
            return self.tensor(name, shape)
        codes = self.tensor(codes_name, shape)
        meta = self.tensors[codes_name][1]
        group_size = meta.get("group_size")
        n_groups = 1 if group_size is None else shape[1] // int(group_size)
        scales = self.tensor(f"{name}.scales", (shape[0], n_groups))
        return QuantizedLinear(
            codes=codes,
            scales=scales,
            bits=int(meta["bits"]),
            group_size=None if group_size is None else int(group_size),
            act_bits=meta.get("act_bits"),
        )

    def norm(self, prefix: str) -> NormParams:
        h = self.config.hidden
        gamma = self.tensor(f"{prefix}.gamma", (h,))
        beta = None
        if self.config.norm_kind is NormKind.LAYERNORM:
            beta = self.tensor(f"{prefix}.beta", (h,))
        return NormParams(gamma, beta)

    def model(self) -> TransformerModel:
        cfg = self.config
        h = cfg.hidden
        shapes = {"wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h), "w_up": (4 * h, h), "w_down": (h, 4 * h)}
        blocks = []
        for index in range(cfg.n_layers):
            prefix = f"blocks.{index}"
            blocks.append(
                TransformerBlock(
                    **{name: self.linear(f"{prefix}.{name}", shapes[name]) for name in LINEAR_NAMES},
                    ln1=self.norm(f"{prefix}.ln1"),
                    ln2=self.norm(f"{prefix}.ln2"),
                )
            )
        return TransformerModel(
            config=cfg,
            tok_emb=self.tensor("tok_emb", (cfg.vocab_size, h)),
            pos_emb=self.tensor("pos_emb", (cfg.max_seq_len, h)),
            blocks=blocks,
            final_norm=self.norm("final_norm"),
        )


def load_checkpoint(path: PathLike) -> TransformerModel:
    """Load a float or quantized checkpoint; raises FormatError without returning partial models"""
    path = Path(path)
    config_payload = _read_json(path / CONFIG_FILE)
    manifest = _read_json(path / MANIFEST_FILE)
    try:
        blob = (path / BLOB_FILE).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing checkpoint file {BLOB_FILE} in {path}") from e

    try:
        config = ModelConfig.from_dict(config_payload["model"]).check()
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"config.json has no usable model section: {e}") from e

    model = _Assembler(config, _decode_entries(manifest, blob)).model()
    logger.info("Loaded checkpoint", path=str(path), n_layers=config.n_layers)
    return model


def read_provenance(path: PathLike) -> Dict[str, Any]:
    return _read_json(Path(path) / CONFIG_FILE).get("provenance", {})
