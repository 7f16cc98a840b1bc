"""
Stage 3: evaluate trained cells and orchestrate full runs.

``run_cell`` trains and evaluates one (cell, seed). ``main`` (the ``run``
subcommand) pretrains every seed, runs all cells in a joblib pool, skips cells
the manifest marks complete, and writes the cross-strategy comparison.
"""

import logging
import os

import pandas as pd
from joblib import Parallel, delayed

from daftlab.checkpoint import load_checkpoint
from daftlab.diagnostics import (POST_CONVERSION, PRE_CONVERSION, RunMetrics, corruption_error, feature_similarity,
                                 method_comparison, relative_change)
from daftlab.errors import DaftError
from daftlab.nn_core import accuracy
from daftlab.tracking import RunTracker
from scripts import pretrain as pretrain_stage
from scripts.finetune import write_frame, train_cell
from scripts.manifest import RunManifest, cell_dir, cell_key, pretrain_key, read_json, write_json

logger = logging.getLogger(__name__)


def evaluate_cell(config, cell, seed, result, pretrained, task):
    """Diagnostics of a trained cell; returns ``(RunMetrics, paths)``."""
    out_dir = cell_dir(config.output_dir, seed, cell)
    net = result.network
    dtype_task = task.astype(net.dtype)
    test_id = dtype_task.target_test_id
    id_accuracy = accuracy(net, test_id.features, test_id.labels)
    ood_accuracies = {level: accuracy(net, split.features, split.labels)
                      for level, split in sorted(dtype_task.target_test_ood.items())}

    similarity = feature_similarity(pretrained, net, test_id, bins=config.histogram_bins)
    baseline = POST_CONVERSION if result.conversion is not None else PRE_CONVERSION
    change = relative_change(result.baseline, net, baseline=baseline)
    corruption = corruption_error(net, dtype_task, seed=seed) if config.corruption_eval else None
    metrics = RunMetrics.from_reports(cell, seed, similarity, change, id_accuracy,
                                      ood_accuracies[task.strong_ood_name], corruption)

    paths = {
        "similarity_csv": write_frame(similarity.to_frame(), os.path.join(out_dir, "similarity.csv")),
        "similarity_histogram": write_frame(similarity.histogram_frame(),
                                             os.path.join(out_dir, "similarity_histogram.csv")),
        "similarity_json": write_json(os.path.join(out_dir, "similarity.json"), similarity.to_dict()),
        "relative_change_csv": write_frame(change.to_frame(), os.path.join(out_dir, "relative_change.csv")),
        "relative_change_json": write_json(os.path.join(out_dir, "relative_change.json"), change.to_dict()),
    }
    if corruption is not None:
        paths["corruption_csv"] = write_frame(corruption.to_frame(), os.path.join(out_dir, "corruption.csv"))
        paths["corruption_json"] = write_json(os.path.join(out_dir, "corruption.json"), corruption.to_dict())
    paths["metrics"] = write_json(os.path.join(out_dir, "metrics.json"), dict(
        metrics.to_dict(), ood_accuracy_by_level=ood_accuracies, best_epoch=result.log.best_epoch,
        eta_theta=result.config.eta_theta, eta_w=result.config.eta_w))
    return metrics, paths


def run_cell(config, cell, seed, pretrained_path):
    """Train and evaluate one cell; failures become a result, not an exception."""
    key = cell_key(seed, cell)
    try:
        fingerprint = config.cell_fingerprint(cell, seed)
        result, paths = train_cell(config, cell, seed, pretrained_path)
        metrics, eval_paths = evaluate_cell(config, cell, seed, result, load_checkpoint(pretrained_path),
                                            pretrain_stage.task_for_seed(config, seed))
        paths.update(eval_paths)
        logger.info("%s seed %d: ID %.4f, OOD %.4f, median cosine %.4f", cell, seed,
                    metrics.id_accuracy, metrics.ood_accuracy, metrics.median_cosine)
        return {"key": key, "ok": True, "paths": paths, "metrics": metrics.to_dict(), "fingerprint": fingerprint}
    except DaftError as err:
        logger.error("%s seed %d failed: %s", cell, seed, err)
        return {"key": key, "ok": False, "error": str(err), "exit_code": err.exit_code}


def _pretrain_cell(config, seed):
    try:
        return {"key": pretrain_key(seed), "ok": True, "paths": pretrain_stage.pretrain_seed(config, seed),
                "fingerprint": config.pretrain_fingerprint(seed)}
    except DaftError as err:
        logger.error("pretraining seed %d failed: %s", seed, err)
        return {"key": pretrain_key(seed), "ok": False, "error": str(err), "exit_code": err.exit_code}


def _collect(manifest, outcomes, output_dir):
    exit_code = 0
    for outcome in outcomes:
        if outcome["ok"]:
            manifest.record(outcome["key"], outcome["paths"], outcome["fingerprint"])
        else:
            manifest.record_failure(outcome["key"], outcome["error"], outcome["exit_code"])
            exit_code = max(exit_code, outcome["exit_code"])
    manifest.save(output_dir)
    return exit_code


SUMMARY_METRICS = ["id_accuracy", "ood_accuracy", "median_cosine", "median_l2", "mean_relative_change",
                   "statistic_relative_change", "head_relative_change", "mean_corruption_error"]


def summarize(runs):
    """Mean and standard deviation of every metric per strategy, in run order."""
    grouped = runs.groupby("strategy", sort=False)[SUMMARY_METRICS]
    summary = grouped.agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary.insert(0, "seeds", grouped.size())
    return summary.reset_index()


def write_comparison(config, manifest):
    """Aggregate completed cells into ``runs.csv`` and the comparison reports."""
    runs = []
    for seed in config.seeds:
        for cell, _, _ in config.cells():
            key = cell_key(seed, cell)
            if manifest.is_complete(key, config.cell_fingerprint(cell, seed)):
                runs.append(RunMetrics.from_dict(read_json(manifest.paths(key)["metrics"])))
    paths = {}
    if not runs:
        return paths
    frame = pd.DataFrame([run.to_dict() for run in runs])
    paths["runs"] = write_frame(frame, os.path.join(config.output_dir, "runs.csv"))
    paths["summary"] = write_frame(summarize(frame), os.path.join(config.output_dir, "summary.csv"))

    complete_seeds = set(config.seeds)
    for cell in {run.strategy for run in runs}:
        complete_seeds &= {run.seed for run in runs if run.strategy == cell}
    compared = [run for run in runs if run.seed in complete_seeds]
    if len({run.strategy for run in compared}) < 2:
        logger.info("Fewer than two strategies completed on common seeds; no comparison written")
        return paths
    if len(compared) != len(runs):
        logger.warning("Comparison restricted to seeds %s where every cell completed", sorted(complete_seeds))
    summary = method_comparison(compared)
    paths["comparison"] = write_frame(summary.to_frame(), os.path.join(config.output_dir, "comparison.csv"))
    paths["comparison_deltas"] = write_frame(summary.deltas_frame(),
                                              os.path.join(config.output_dir, "comparison_deltas.csv"))
    paths["comparison_json"] = write_json(os.path.join(config.output_dir, "comparison.json"), summary.to_dict())
    return paths


def main(config):
    """``run`` subcommand; returns the process exit code."""
    manifest = RunManifest.open(config.output_dir, config.config_hash())
    manifest.extras["config"] = config.to_dict()
    tracker = RunTracker.from_config(config)
    parallel = Parallel(n_jobs=config.n_jobs)

    pending = [seed for seed in config.seeds
               if not manifest.is_complete(pretrain_key(seed), config.pretrain_fingerprint(seed))]
    exit_code = _collect(manifest, parallel(delayed(_pretrain_cell)(config, seed) for seed in pending),
                         config.output_dir)

    jobs = []
    for seed in config.seeds:
        if not manifest.is_complete(pretrain_key(seed), config.pretrain_fingerprint(seed)):
            continue
        checkpoint = manifest.paths(pretrain_key(seed))["checkpoint"]
        for cell, _, _ in config.cells():
            if manifest.is_complete(cell_key(seed, cell), config.cell_fingerprint(cell, seed)):
                logger.info("%s seed %d already complete, skipping", cell, seed)
                continue
            jobs.append((cell, seed, checkpoint))
    outcomes = parallel(delayed(run_cell)(config, cell, seed, checkpoint) for cell, seed, checkpoint in jobs)
    exit_code = max(exit_code, _collect(manifest, outcomes, config.output_dir))

    for outcome in outcomes:
        if outcome["ok"]:
            tracker.log_cell(outcome["key"], {"config_hash": config.config_hash(), **outcome["metrics"]},
                             outcome["metrics"], os.path.dirname(outcome["paths"]["metrics"]))

    manifest.extras["reports"] = write_comparison(config, manifest)
    manifest.save(config.output_dir)
    current = {pretrain_key(seed) for seed in config.seeds}
    current |= {cell_key(seed, cell) for seed in config.seeds for cell, _, _ in config.cells()}
    failed = manifest.failed(current)
    if failed:
        logger.error("%d cells failed: %s", len(failed), sorted(failed))
        exit_code = max([exit_code] + [entry["exit_code"] for entry in failed.values()])
    return exit_code
