"""
Shared pytest setup.

Puts src/ and the repository root on sys.path the same way the entry script
does, and provides small factories for stub-executable pipelines.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"

# Add src to path
sys.path.insert(0, os.path.join(ROOT, "src"))
sys.path.insert(0, str(ROOT))

from core import DepthMap  # noqa: E402


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("PANODEPTH_SEED", raising=False)
    monkeypatch.delenv("PANODEPTH_THREADS", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def depth_of(values, valid=None) -> DepthMap:
    return DepthMap.from_array(np.asarray(values, dtype=np.float64), valid)


def stub_command(name: str, *extra: str) -> str:
    """Command template running a fixture script with the current interpreter."""
    parts = ["{python}", str(FIXTURES / name)] + list(extra)
    return " ".join(parts)
