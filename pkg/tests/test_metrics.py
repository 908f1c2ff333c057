import logging

from services import metrics


def test_events_are_appended_as_jsonl(tmp_path):
    path = tmp_path / "logs" / "events.jsonl"
    metrics.configure(path, "run-1")
    metrics.log_run_started(run_id="run-1", kind="simulate", name="heat", seed=4)
    metrics.log_sweep_point(run_id="run-1", index=0, amplitude=10.0, status="ok", tau=0.5, reached=True)
    metrics.log_run_finished(run_id="run-1", kind="simulate", passed=True, sentinel=False, wall_time=0.1)
    events = metrics.read_events(path)
    assert [e["event_type"] for e in events] == ["run_started", "sweep_point", "run_finished"]
    assert events[0]["extra"] == {"name": "heat", "seed": 4}
    assert events[1]["extra"]["tau"] == 0.5
    assert events[2]["status"] == "passed"


def test_step_refined_uses_configured_run(tmp_path):
    path = tmp_path / "events.jsonl"
    metrics.configure(path, "run-2")
    metrics.log_step_refined(dt=0.05, residual_rate=1e-3)
    (event,) = metrics.read_events(path)
    assert event["run_id"] == "run-2"
    assert event["extra"]["dt"] == 0.05


def test_events_go_to_text_log(caplog):
    metrics.configure(None)
    with caplog.at_level(logging.INFO, logger="services.metrics"):
        metrics.log_invariant_check(run_id="r", name="monotone_decay", passed=False, value=1e-3)
    assert "metrics_event" in caplog.text
    assert "invariant_check" in caplog.text


def test_write_failure_is_logged_not_raised(tmp_path, caplog):
    metrics.configure(tmp_path)
    with caplog.at_level(logging.ERROR, logger="services.metrics"):
        metrics.log_sentinel(run_id="r", kind="sweep", reason="tau not reached")
    assert "Failed to log sentinel metrics" in caplog.text


def test_read_events_of_missing_file(tmp_path):
    assert metrics.read_events(tmp_path / "none.jsonl") == []
