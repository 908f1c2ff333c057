from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from services.export import canonical_json, write_json

logger = logging.getLogger(__name__)

RECORD_FILE = "record.json"
SUMMARY_FILE = "summary.json"


@dataclass
class RunRecord:
    run_id: str
    kind: str
    name: str
    seed: int
    spec: Dict[str, Any]
    code_version: str

    # артефакты: имя → путь относительно папки прогона
    artifacts: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)

    passed: bool = True
    sentinel: bool = False

    # технические поля (в summary.json не попадают)
    wall_time: float = 0.0
    created_at: float = 0.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(
            run_id=str(data["run_id"]),
            kind=str(data["kind"]),
            name=str(data.get("name") or data["kind"]),
            seed=int(data.get("seed", 0)),
            spec=dict(data.get("spec") or {}),
            code_version=str(data.get("code_version") or ""),
            artifacts=dict(data.get("artifacts") or {}),
            summary=dict(data.get("summary") or {}),
            passed=bool(data.get("passed", True)),
            sentinel=bool(data.get("sentinel", False)),
            wall_time=float(data.get("wall_time") or 0.0),
            created_at=float(data.get("created_at") or 0.0),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def summary_document(self) -> Dict[str, Any]:
        """Содержимое summary.json: только детерминированные поля."""
        return {
            "run_id": self.run_id,
            "kind": self.kind,
            "name": self.name,
            "seed": self.seed,
            "spec": self.spec,
            "code_version": self.code_version,
            "passed": self.passed,
            "sentinel": self.sentinel,
            "artifacts": self.artifacts,
            "summary": self.summary,
        }

    def summary_json(self) -> str:
        return canonical_json(self.summary_document())


class RunStore:
    """
    Папка на прогон: <root>/<run_id>/{record.json, summary.json, артефакты}.
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        logger.debug("Run store at %s", self.root)

    # --------------- Пути ---------------

    def run_dir(self, run_id: str) -> Path:
        path = self.root / run_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    # --------------- Запись / чтение ---------------

    def save(self, record: RunRecord) -> Path:
        if not record.created_at:
            record.created_at = time.time()
        run_dir = self.run_dir(record.run_id)
        write_json(run_dir / SUMMARY_FILE, record.summary_document())
        path = write_json(run_dir / RECORD_FILE, record.to_dict())
        logger.info("Saved run %s (%s) to %s", record.run_id, record.kind, run_dir)
        return path

    def load(self, run_id: str) -> Optional[RunRecord]:
        path = self.root / run_id / RECORD_FILE
        if not path.exists():
            return None
        try:
            return RunRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except Exception:
            logger.exception("Failed to read run record %s", path)
            return None

    def list_records(self) -> List[RunRecord]:
        records = []
        for path in sorted(self.root.glob(f"*/{RECORD_FILE}")):
            rec = self.load(path.parent.name)
            if rec is not None:
                records.append(rec)
        return records
