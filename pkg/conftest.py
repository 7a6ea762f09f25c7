"""
Shared pytest fixtures: tiny seeded toy models and helpers
"""

import os
import sys

import pytest
import structlog
import torch

from normtweak.core.numerics import Rng
from normtweak.models.transformer import ModelConfig, NormKind, init_model
from normtweak.services.calibration import CalibrationSet, CalibrationSource


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale reproductions, run with NORMTWEAK_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("NORMTWEAK_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set NORMTWEAK_RUN_SLOW=1 to run desk-scale reproductions")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


class _CurrentStderr:
    """Resolve sys.stderr at write time so loggers outlive pytest's per-phase capture streams"""

    def write(self, text):
        return sys.stderr.write(text)

    def flush(self):
        sys.stderr.flush()


@pytest.fixture(autouse=True)
def late_bound_log_stream(monkeypatch):
    real_factory = structlog.PrintLoggerFactory
    monkeypatch.setattr(structlog, "PrintLoggerFactory", lambda file=None: real_factory(file=_CurrentStderr()))


@pytest.fixture(autouse=True)
def isolated_registry(tmp_path, monkeypatch):
    """Keep the run registry out of the working directory"""
    monkeypatch.setenv("NORMTWEAK_DATABASE_URL", f"sqlite:///{tmp_path / 'runs.db'}")


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=64, hidden=32, n_layers=2, n_heads=4, max_seq_len=16)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, Rng(0))


@pytest.fixture
def tiny_model64(tiny_config):
    # larger init so quantization error is visible at toy scale
    return init_model(tiny_config, Rng(0), std=0.2, dtype=torch.float64)


@pytest.fixture
def rms_model64():
    config = ModelConfig(vocab_size=64, hidden=32, n_layers=2, n_heads=4, max_seq_len=16, norm_kind=NormKind.RMSNORM)
    return init_model(config, Rng(1), std=0.2, dtype=torch.float64)


def random_tokens(seed: int, n: int, length: int, vocab: int) -> torch.Tensor:
    return Rng(seed).randint(vocab, (n, length))


def token_calibration(seed: int, n: int, length: int, vocab: int) -> CalibrationSet:
    return CalibrationSet(source=CalibrationSource.REAL, seed=seed, tokens=random_tokens(seed, n, length, vocab))


@pytest.fixture
def calib_set(tiny_config):
    return token_calibration(7, 4, 12, tiny_config.vocab_size)
