from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
import pytest

from services import metrics


@pytest.fixture(autouse=True)
def _reset_event_log():
    yield
    metrics.configure(None)


@pytest.fixture(autouse=True)
def _no_worker_env(monkeypatch):
    monkeypatch.delenv("DISSIPATOR_WORKERS", raising=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[..., Path]:
    """Пишет конфиг эксперимента в tmp_path и возвращает путь."""

    def _write(data: Dict[str, Any], name: str = "experiment.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def heat_config() -> Dict[str, Any]:
    return {
        "schema_version": 1,
        "kind": "simulate",
        "name": "heat-e1",
        "seed": 11,
        "operator": {"type": "free-jacobi", "N": 8},
        "initial": {"type": "basis", "j": 1},
        "evolution": {"amplitude": 0.0, "t_end": 1.0, "dt": 0.001, "sample_stride": 100},
        "diagnostics": {"delta": 0.5},
    }
