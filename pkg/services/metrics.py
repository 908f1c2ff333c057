from __future__ import annotations

import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

# Журнал событий текущего прогона (JSONL). None — только текстовый лог.
_EVENT_LOG_PATH: Optional[Path] = None
_RUN_ID: Optional[str] = None
_LOCK = threading.Lock()


def configure(path: Optional[Path], run_id: Optional[str] = None) -> None:
    """Куда дописывать события и какой прогон сейчас идёт. Вызывается раннером."""
    global _EVENT_LOG_PATH, _RUN_ID
    _RUN_ID = run_id
    _EVENT_LOG_PATH = Path(path) if path is not None else None
    if _EVENT_LOG_PATH is not None:
        _EVENT_LOG_PATH.parent.mkdir(parents=True, exist_ok=True)


def _clean(value: Any) -> Any:
    # numpy-скаляры и прочее приводим к json-совместимым типам
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        try:
            return value.item()
        except (TypeError, ValueError):
            return str(value)
    return value


def _insert_event(
    *,
    event_type: str,
    run_id: Optional[str] = None,
    kind: Optional[str] = None,
    status: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    payload = {
        "ts": time.time(),
        "event_type": event_type,
        "run_id": run_id,
        "kind": kind,
        "status": status,
        "extra": _clean(extra or {}),
    }
    line = json.dumps(payload, ensure_ascii=False, sort_keys=True)

    path = _EVENT_LOG_PATH
    if path is not None:
        with _LOCK:
            with path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    # Структурный лог в текстовый лог — удобно парсить потом
    try:
        logger.info("metrics_event %s", line)
    except Exception:
        logger.debug("Failed to json-log metrics_event", exc_info=True)


def read_events(path: Path) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        return []
    events = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        raw = raw.strip()
        if raw:
            events.append(json.loads(raw))
    return events


# ----------------------- Публичные функции логирования -----------------------


def log_run_started(*, run_id: str, kind: str, name: str, seed: int) -> None:
    try:
        _insert_event(
            event_type="run_started",
            run_id=run_id,
            kind=kind,
            extra={"name": name, "seed": seed},
        )
    except Exception as e:
        logger.exception("Failed to log run_started metrics: %s", e)


def log_run_finished(
    *,
    run_id: str,
    kind: str,
    passed: bool,
    sentinel: bool,
    wall_time: float,
) -> None:
    """
    Финал прогона: прошли ли все проверки, сработал ли бюджетный сентинел.
    """
    try:
        _insert_event(
            event_type="run_finished",
            run_id=run_id,
            kind=kind,
            status="passed" if passed else "failed",
            extra={"sentinel": sentinel, "wall_time": wall_time},
        )
    except Exception as e:
        logger.exception("Failed to log run_finished metrics: %s", e)


def log_invariant_check(
    *,
    run_id: str,
    name: str,
    passed: bool,
    value: Optional[float] = None,
    detail: Optional[str] = None,
) -> None:
    try:
        _insert_event(
            event_type="invariant_check",
            run_id=run_id,
            status="passed" if passed else "failed",
            extra={"name": name, "value": value, "detail": detail},
        )
    except Exception as e:
        logger.exception("Failed to log invariant_check metrics: %s", e)


def log_sweep_point(
    *,
    run_id: str,
    index: int,
    amplitude: float,
    status: str,
    tau: Optional[float] = None,
    reached: Optional[bool] = None,
    error: Optional[str] = None,
) -> None:
    """
    Одна точка свипа. status: ok / failed.
    """
    try:
        _insert_event(
            event_type="sweep_point",
            run_id=run_id,
            kind="sweep",
            status=status,
            extra={
                "index": index,
                "amplitude": amplitude,
                "tau": tau,
                "reached": reached,
                "error": error,
            },
        )
    except Exception as e:
        logger.exception("Failed to log sweep_point metrics: %s", e)


def log_step_refined(*, dt: float, residual_rate: float, run_id: Optional[str] = None) -> None:
    try:
        _insert_event(
            event_type="step_refined",
            run_id=run_id or _RUN_ID,
            extra={"dt": dt, "residual_rate": residual_rate},
        )
    except Exception as e:
        logger.exception("Failed to log step_refined metrics: %s", e)


def log_sentinel(*, run_id: str, kind: str, reason: str) -> None:
    """
    Бюджет исчерпан (τ_δ не достигнут, нет тушения, поиск A* без результата).
    Это не ошибка: прогон завершается с кодом 0 и флагом в сводке.
    """
    try:
        _insert_event(
            event_type="sentinel",
            run_id=run_id,
            kind=kind,
            status="sentinel",
            extra={"reason": reason},
        )
        logger.warning("Sentinel in run %s (%s): %s", run_id, kind, reason)
    except Exception as e:
        logger.exception("Failed to log sentinel metrics: %s", e)
