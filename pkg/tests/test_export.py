import math
import os

import numpy as np
import pytest

from services import export
from services.export import (
    DECAY_COLUMNS,
    REPORT_COLUMNS,
    atomic_write_text,
    canonical_json,
    export_decay_curve,
    export_report,
    format_float,
    load_report,
    read_csv,
    run_id_for,
    scalar_summary,
    write_csv,
)
from services.storage import RunRecord


def _record(run_id="abc", summary=None):
    return RunRecord(
        run_id=run_id,
        kind="simulate",
        name="heat",
        seed=3,
        spec={"kind": "simulate"},
        code_version="0.1.0",
        summary=summary if summary is not None else {"final_norm": 0.5, "nested": {"x": 1}},
    )


def test_format_float():
    assert format_float(0.1) == "0.10000000000000001"
    assert format_float(None) == ""
    assert format_float(math.nan) == ""
    assert format_float(True) == "1"
    assert format_float(np.bool_(False)) == "0"
    assert format_float(3) == "3"
    assert float(format_float(math.pi)) == math.pi


def test_canonical_json_replaces_non_finite():
    text = canonical_json({"b": math.nan, "a": [1.0, math.inf]})
    assert text.index('"a"') < text.index('"b"')
    assert "null" in text
    assert "NaN" not in text and "Infinity" not in text


def test_run_id_ignores_key_order():
    a = run_id_for({"kind": "simulate", "seed": 1, "operator": {"N": 8, "type": "free-jacobi"}})
    b = run_id_for({"operator": {"type": "free-jacobi", "N": 8}, "seed": 1, "kind": "simulate"})
    assert a == b
    assert len(a) == 16
    assert a != run_id_for({"kind": "simulate", "seed": 2})


def test_csv_header_only_and_row_length(tmp_path):
    path = write_csv(tmp_path / "empty.csv", ("a", "b"), [])
    assert path.read_text() == "a,b\n"
    with pytest.raises(ValueError):
        write_csv(tmp_path / "bad.csv", ("a", "b"), [(1,)])


def test_decay_rows_leave_unreached_tau_empty(tmp_path):
    path = export_decay_curve(tmp_path / "decay.csv", [(10.0, None, 0), (1.0, 0.25, 1)])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(DECAY_COLUMNS)
    assert lines[1] == "10,,0"
    assert read_csv(path)[1] == {"A": "1", "tau_delta": "0.25", "reached": "1"}


def test_atomic_write_keeps_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    atomic_write_text(target, "old")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(export.os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_text(target, "new")
    assert target.read_text() == "old"
    assert sorted(os.listdir(tmp_path)) == ["out.txt"]


def test_scalar_summary_flattens_and_skips_lists():
    flat = scalar_summary({"a": 1, "b": {"c": 2.5, "d": [1, 2]}, "e": [3]})
    assert flat == {"a": 1, "b.c": 2.5}


def test_empty_report_is_header_only(tmp_path):
    paths = export_report([], tmp_path)
    assert paths["csv"].read_text() == ",".join(REPORT_COLUMNS) + "\n"
    assert load_report(paths["json"]) == []


def test_report_round_trip(tmp_path):
    paths = export_report([_record("r1"), _record("r2", {"tau": None})], tmp_path, stem="runs")
    rows = read_csv(paths["csv"])
    keys = [(r["run_id"], r["key"], r["value"]) for r in rows]
    assert ("r1", "final_norm", "0.5") in keys
    assert ("r1", "nested.x", "1") in keys
    assert ("r2", "tau", "") in keys
    assert rows[0]["passed"] == "1" and rows[0]["sentinel"] == "0"
    loaded = load_report(paths["json"])
    assert [r["run_id"] for r in loaded] == ["r1", "r2"]
    assert RunRecord.from_dict(loaded[0]).summary == _record("r1").summary
