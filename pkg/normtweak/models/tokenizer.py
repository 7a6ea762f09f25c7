"""
Byte-level tokenizer and token-corpus file helpers
"""

from pathlib import Path
from typing import List, Union

import numpy as np
import torch

from normtweak.core.errors import InputError

TOKEN_FILE_SUFFIXES = (".bin", ".u16", ".tok")


class ByteTokenizer:
    """UTF-8 bytes as token ids (vocabulary of 256)"""

    vocab_size = 256

    def encode(self, text: str) -> List[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: List[int]) -> str:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")


def load_corpus(path: Union[str, Path]) -> torch.Tensor:
    """Flat u16 little-endian token files, or UTF-8 text through the byte tokenizer"""
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus file not found: {path}")
    if path.suffix in TOKEN_FILE_SUFFIXES:
        raw = path.read_bytes()
        if len(raw) % 2:
            raise InputError(f"{path} has an odd byte count; expected u16 token ids")
        ids = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    else:
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise InputError(f"{path} is not valid UTF-8 text (byte {e.start}); use a u16 token file instead") from e
        ids = np.asarray(ByteTokenizer().encode(text), dtype=np.int64)
    return torch.from_numpy(ids)


def save_tokens(tokens: torch.Tensor, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tokens.reshape(-1).numpy().astype("<u2").tobytes())
    return path
