#!/usr/bin/env python3
"""
Tests for optional MLflow tracking: disabled by default, falls back to a
warning when the server is unreachable, logs cells to a local file store.
"""

import math

import mlflow
import pytest

from daftlab import tracking
from daftlab.tracking import DEFAULT_TRACKING_URI, RunTracker


def test_disabled_tracker_logs_nothing():
    tracker = RunTracker()
    assert not tracker.available
    assert tracker.log_cell("seed_0/DAFT", {"eta_w": 0.1}, {"id_accuracy": 0.9}) is None


def test_environment_configures_uri_and_experiment(monkeypatch):
    monkeypatch.delenv("MLFLOW_TRACKING_URI", raising=False)
    assert RunTracker().tracking_uri == DEFAULT_TRACKING_URI
    monkeypatch.setenv("MLFLOW_TRACKING_URI", "http://tracking.invalid:5000")
    monkeypatch.setenv("DAFTLAB_EXPERIMENT", "bn-ablation")
    tracker = RunTracker()
    assert tracker.tracking_uri == "http://tracking.invalid:5000"
    assert tracker.experiment == "bn-ablation"


def test_unreachable_server_falls_back(monkeypatch, caplog):
    def unreachable(*args, **kwargs):
        raise ConnectionError("connection refused")

    monkeypatch.setattr(tracking.mlflow, "set_tracking_uri", unreachable)
    tracker = RunTracker(enabled=True, tracking_uri="http://tracking.invalid:5000")
    assert not tracker.available
    assert "continuing without tracking" in caplog.text
    assert tracker.log_cell("seed_0/FT", {}, {}) is None


@pytest.fixture
def file_store(tmp_path):
    yield f"file://{tmp_path / 'mlruns'}"
    mlflow.set_tracking_uri(DEFAULT_TRACKING_URI)


def test_log_cell_to_file_store(tmp_path, file_store):
    artifacts = tmp_path / "cell"
    artifacts.mkdir()
    (artifacts / "metrics.json").write_text("{}", encoding="utf-8")
    tracker = RunTracker(enabled=True, experiment="daftlab-tests", tracking_uri=file_store)
    assert tracker.available

    run_id = tracker.log_cell("seed_0/DAFT", {"strategy": "DAFT", "l2_grid": list(range(200))},
                              {"id_accuracy": 0.75, "head_relative_change": math.nan, "note": "text"},
                              str(artifacts), tags={"cell": "DAFT"})
    run = mlflow.tracking.MlflowClient(tracking_uri=file_store).get_run(run_id)
    assert run.data.metrics == {"id_accuracy": 0.75}
    assert run.data.params["strategy"] == "DAFT"
    assert len(run.data.params["l2_grid"]) == tracking.MAX_PARAM_LENGTH
    assert run.data.tags["cell"] == "DAFT"
