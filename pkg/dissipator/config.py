from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Базовые пути
BASE_DIR = Path(__file__).resolve().parent.parent
ENV_PATH = BASE_DIR / ".env"

if ENV_PATH.exists():
    load_dotenv(ENV_PATH)


def _get_env(name: str, default: str | None = None, required: bool = False) -> str:
    value = os.getenv(name, default)
    if required and not value:
        raise RuntimeError(f"{name} is not set in environment variables")
    return value or ""


def _get_int(name: str, default: int) -> int:
    raw = _get_env(name, str(default)).strip()
    try:
        return int(raw)
    except ValueError as e:
        raise RuntimeError(f"{name} must be an integer, got {raw!r}") from e


# Storage
DATA_DIR = BASE_DIR / "data"
DATA_DIR.mkdir(exist_ok=True)
CONFIGS_DIR = DATA_DIR / "configs"

OUT_DIR = Path(_get_env("DISSIPATOR_OUT_DIR", str(DATA_DIR / "runs")))
EVENT_LOG_NAME = _get_env("DISSIPATOR_EVENT_LOG", "events.jsonl")

# Logging
LOG_LEVEL = _get_env("DISSIPATOR_LOG_LEVEL", "INFO").upper()

# Параллелизм: --workers в CLI важнее переменной окружения
WORKERS_ENV = "DISSIPATOR_WORKERS"

# Numerical budgets: движок и операторы читают их отсюда в момент вызова
ORACLE_MAX_DIM = _get_int("DISSIPATOR_ORACLE_MAX_DIM", 1024)
DENSE_MAX_DIM = _get_int("DISSIPATOR_DENSE_MAX_DIM", 4096)
MAX_STEPS = _get_int("DISSIPATOR_MAX_STEPS", 2**20)


def resolve_workers(cli_value: Optional[int] = None) -> int:
    """--workers, затем DISSIPATOR_WORKERS, затем 1."""
    if cli_value is not None:
        value = int(cli_value)
    else:
        value = _get_int(WORKERS_ENV, 1)
    if value < 1:
        raise RuntimeError(f"worker count must be >= 1, got {value}")
    return value
