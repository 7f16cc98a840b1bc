"""Diagnostics between two checkpoints on a CSV test set, plus the gradient check."""

import logging
import os

import numpy as np
import pandas as pd

from daftlab.checkpoint import load_checkpoint
from daftlab.data import load_csv
from daftlab.diagnostics import (DEFAULT_HISTOGRAM_BINS, PRE_CONVERSION, corruption_error, feature_similarity,
                                 relative_change)
from daftlab.errors import NumericalError
from daftlab.gradcheck import check_layer, check_network
from daftlab.nn_core import TEST, TRAIN, accuracy
from scripts.finetune import write_frame
from scripts.manifest import write_json

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-6


def gradcheck(net, data, samples=16, seed=0):
    """Finite-difference check of every layer and of the full loss in both BN modes."""
    net = net.copy()
    if net.dtype != np.float64:
        raise NumericalError("gradient checks need a float64 checkpoint")
    rng = np.random.default_rng(seed)
    index = rng.choice(len(data), size=min(samples, len(data)), replace=False)
    x = data.features[index].astype(np.float64)
    labels = data.labels[index]
    net.frozen = set()
    rows = []
    activations = x
    for path, layer in net.named_layers():
        modes = (TRAIN, TEST) if layer.kind == "batchnorm" else (None,)
        for mode in modes:
            if mode is not None:
                layer.mode = mode
            for tensor, error in check_layer(layer, activations, seed=seed).items():
                rows.append({"check": "layer", "path": path, "bn_mode": mode or "", "tensor": tensor, "error": error})
        if layer.kind == "batchnorm":
            layer.mode = TEST
        activations, _ = layer.forward(activations)
    for mode in (TRAIN, TEST):
        for path, error in check_network(net, x, labels, bn_mode=mode).items():
            rows.append({"check": "network", "path": path, "bn_mode": mode, "tensor": path.rsplit(".", 1)[1],
                         "error": error})
    return pd.DataFrame(rows, columns=["check", "path", "bn_mode", "tensor", "error"])


def main(pre_path, post_path, dataset_path, output_dir, bins=DEFAULT_HISTOGRAM_BINS, baseline=PRE_CONVERSION,
         corruption=False, run_gradcheck=False, seed=0):
    """``diagnose`` subcommand; returns ``{report name: path}``."""
    pre = load_checkpoint(pre_path)
    post = load_checkpoint(post_path)
    data = load_csv(dataset_path, dtype=post.dtype)
    similarity = feature_similarity(pre, post, data, bins=bins)
    change = relative_change(pre, post, baseline=baseline)
    paths = {
        "similarity_csv": write_frame(similarity.to_frame(), os.path.join(output_dir, "similarity.csv")),
        "similarity_histogram": write_frame(similarity.histogram_frame(),
                                            os.path.join(output_dir, "similarity_histogram.csv")),
        "similarity_json": write_json(os.path.join(output_dir, "similarity.json"), similarity.to_dict()),
        "relative_change_csv": write_frame(change.to_frame(), os.path.join(output_dir, "relative_change.csv")),
        "relative_change_json": write_json(os.path.join(output_dir, "relative_change.json"), change.to_dict()),
    }
    summary = {"pre_accuracy": accuracy(pre, data.features, data.labels),
               "post_accuracy": accuracy(post, data.features, data.labels)}
    if corruption:
        table = corruption_error(post, None, seed=seed, test_set=data)
        paths["corruption_csv"] = write_frame(table.to_frame(), os.path.join(output_dir, "corruption.csv"))
        summary["mean_corruption_error"] = table.mean_corruption_error
    if run_gradcheck:
        errors = gradcheck(post, data, seed=seed)
        paths["gradcheck"] = write_frame(errors, os.path.join(output_dir, "gradcheck.csv"))
        summary["gradcheck_max_error"] = float(errors["error"].max())
        if summary["gradcheck_max_error"] > GRADCHECK_TOLERANCE:
            logger.warning("Gradient check: max relative error %.3g exceeds %g",
                           summary["gradcheck_max_error"], GRADCHECK_TOLERANCE)
    paths["summary"] = write_json(os.path.join(output_dir, "diagnose_summary.json"), summary)
    return paths
