from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Порядок колонок отчёта по прогонам (export_report) фиксирован.
REPORT_COLUMNS = ("run_id", "kind", "name", "seed", "passed", "sentinel", "key", "value")

DECAY_COLUMNS = ("A", "tau_delta", "reached")
SPECTRUM_COLUMNS = ("j", "E_j", "h1_norm", "band_interior")
TRAJECTORY_COLUMNS = ("t", "norm_l2", "norm_h1", "norm_hminus1", "energy_residual")
QUENCH_COLUMNS = ("t", "sup_T", "int_T", "int_f")
NASH_COLUMNS = ("t", "sup_norm", "ratio")
RAGE_COLUMNS = ("T", "rage", "h1_average", "h1_limit", "h1_remainder")


# ---------------------------------------------------------------------------
# Форматирование
# ---------------------------------------------------------------------------


def format_float(value: Any) -> str:
    """17 значащих цифр: запись обратима без потерь. None и NaN — пустая ячейка."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    x = float(value)
    if math.isnan(x):
        return ""
    return format(x, ".17g")


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        x = float(value)
        # NaN/inf в JSON не допускаются
        return x if math.isfinite(x) else None
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, Path):
        return str(value)
    return value


def canonical_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, ensure_ascii=False, indent=2, allow_nan=False) + "\n"


def run_id_for(spec_raw: Dict[str, Any]) -> str:
    """SHA-256 канонического JSON конфига (первые 16 hex-символов)."""
    blob = json.dumps(_jsonable(spec_raw), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Атомарная запись: temp в той же папке + os.replace
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, obj: Any) -> Path:
    return atomic_write_text(path, canonical_json(obj))


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, expected {len(columns)}")
        writer.writerow([c if isinstance(c, str) else format_float(c) for c in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_npy(path: Path, array: np.ndarray) -> Path:
    buf = io.BytesIO()
    np.save(buf, np.asarray(array), allow_pickle=False)
    return atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Артефакты по видам прогонов
# ---------------------------------------------------------------------------


def export_decay_curve(path: Path, rows: Iterable[Sequence[Any]]) -> Path:
    return write_csv(path, DECAY_COLUMNS, rows)


def export_spectrum(path: Path, rows: Iterable[Sequence[Any]]) -> Path:
    return write_csv(path, SPECTRUM_COLUMNS, rows)


def export_trajectory(path: Path, traj: Any) -> Path:
    residuals = traj.ledger.residuals()
    rows = zip(traj.times, traj.norm_l2, traj.norm_h1, traj.norm_hminus1, residuals)
    return write_csv(path, TRAJECTORY_COLUMNS, rows)


def export_quench(path: Path, run: Any) -> Path:
    return write_csv(path, QUENCH_COLUMNS, zip(run.times, run.sup_T, run.int_T, run.int_f))


def export_nash(path: Path, run: Any) -> Path:
    return write_csv(path, NASH_COLUMNS, zip(run.times, run.sup_norms, run.ratios))


# ---------------------------------------------------------------------------
# Отчёт по набору прогонов
# ---------------------------------------------------------------------------


def _flatten(prefix: str, value: Any, out: Dict[str, Any]) -> None:
    if isinstance(value, dict):
        for k in sorted(value):
            _flatten(f"{prefix}.{k}" if prefix else str(k), value[k], out)
    elif isinstance(value, (list, tuple)):
        return
    else:
        out[prefix] = value


def scalar_summary(summary: Dict[str, Any]) -> Dict[str, Any]:
    """Плоский словарь скаляров сводки (вложенные ключи через точку, списки пропускаются)."""
    out: Dict[str, Any] = {}
    _flatten("", summary, out)
    return out


def _cell(value: Any) -> str:
    if isinstance(value, str):
        return value
    return format_float(value)


def export_report(records: Sequence[Any], out_dir: Path, stem: str = "report") -> Dict[str, Path]:
    """
    CSV (длинный формат, колонки REPORT_COLUMNS) + JSON-бандл полных записей.
    Пустой список — CSV только с заголовком.
    """
    out_dir = Path(out_dir)
    rows: List[List[str]] = []
    for rec in records:
        for key, value in scalar_summary(rec.summary).items():
            rows.append([
                rec.run_id, rec.kind, rec.name, str(rec.seed),
                _cell(rec.passed), _cell(rec.sentinel), key, _cell(value),
            ])
    csv_path = write_csv(out_dir / f"{stem}.csv", REPORT_COLUMNS, rows)
    json_path = write_json(out_dir / f"{stem}.json", {"records": [rec.to_dict() for rec in records]})
    logger.info("Exported report of %d run(s) to %s", len(records), out_dir)
    return {"csv": csv_path, "json": json_path}


def load_report(path: Path) -> List[Dict[str, Any]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return list(data.get("records", []))


def optional_float(value: Optional[float]) -> Optional[float]:
    if value is None:
        return None
    x = float(value)
    return x if math.isfinite(x) else None
