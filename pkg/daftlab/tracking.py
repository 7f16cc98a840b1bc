"""
Optional MLflow tracking of run cells.

Tracking connects once; when the server is unreachable the pipeline logs a
warning and continues without it. Nothing here feeds back into report files.
"""

import logging
import math
import os

import mlflow

logger = logging.getLogger(__name__)

DEFAULT_TRACKING_URI = "file:./mlruns"
DEFAULT_EXPERIMENT = "domain-aware-fine-tuning"
MAX_PARAM_LENGTH = 250


def _param_value(value):
    text = str(value)
    return text if len(text) <= MAX_PARAM_LENGTH else text[:MAX_PARAM_LENGTH - 3] + "..."


class RunTracker:
    def __init__(self, enabled=False, experiment=None, tracking_uri=None):
        self.available = False
        self.tracking_uri = tracking_uri or os.environ.get("MLFLOW_TRACKING_URI", DEFAULT_TRACKING_URI)
        self.experiment = experiment or os.environ.get("DAFTLAB_EXPERIMENT", DEFAULT_EXPERIMENT)
        if not enabled:
            return
        try:
            mlflow.set_tracking_uri(self.tracking_uri)
            mlflow.set_experiment(self.experiment)
            mlflow.tracking.MlflowClient().search_experiments()
            self.available = True
            logger.info("MLflow connected: %s (experiment %s)", self.tracking_uri, self.experiment)
        except Exception as err:
            logger.warning("MLflow connection failed: %s; continuing without tracking", err)

    @classmethod
    def from_config(cls, config):
        return cls(config.tracking.enabled, config.tracking.experiment)

    def log_cell(self, run_name, params, metrics, artifact_dir=None, tags=None):
        """Log one cell as an MLflow run; returns the run id or ``None``."""
        if not self.available:
            return None
        try:
            with mlflow.start_run(run_name=run_name) as run:
                mlflow.set_tags(dict(tags or {}))
                mlflow.log_params({key: _param_value(value) for key, value in params.items()})
                mlflow.log_metrics({key: float(value) for key, value in metrics.items()
                                    if isinstance(value, (int, float)) and math.isfinite(value)})
                if artifact_dir and os.path.isdir(artifact_dir):
                    mlflow.log_artifacts(artifact_dir)
                return run.info.run_id
        except Exception as err:
            logger.warning("MLflow logging failed for %s: %s", run_name, err)
            return None
