"""
Batch-norm conversion to a target domain.

``estimate_target_statistics`` runs the network in test mode over target
mini-batches and records, at every BN input, the per-batch mean and biased
variance. The aggregate is ``M_t = E_B[mu_t]`` and
``Sigma_t = m / (m - 1) * E_B[sigma_t^2]``. ``convert_bn`` then rewrites each
layer so that its test-mode output is unchanged:

    gamma_t = gamma_s * sqrt(Sigma_t + eps) / sqrt(Sigma_s + eps)
    beta_t  = beta_s + gamma_s * (M_t - M_s) / sqrt(Sigma_s + eps)

and replaces ``(M_s, Sigma_s)`` by ``(M_t, Sigma_t)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from daftlab.errors import ConfigError, DataError, NumericalError, ShapeError
from daftlab.nn_core import TEST, ensure_finite, forward

logger = logging.getLogger(__name__)

PRESERVATION_TOLERANCE = {"float64": 1e-9, "float32": 1e-4}


def preservation_tolerance(dtype):
    return PRESERVATION_TOLERANCE[np.dtype(dtype).name]


@dataclass
class LayerStatistics:
    mean_t: np.ndarray
    var_t: np.ndarray
    batches_seen: int
    batch_size_m: int

    def to_dict(self):
        return {"mean_t": self.mean_t.tolist(), "var_t": self.var_t.tolist(),
                "batches_seen": self.batches_seen, "batch_size_m": self.batch_size_m}


@dataclass
class TargetStatistics:
    layers: dict = field(default_factory=dict)

    def __getitem__(self, path):
        return self.layers[path]

    def to_dict(self):
        return {"layers": {path: stats.to_dict() for path, stats in self.layers.items()}}

    @classmethod
    def from_dict(cls, data, dtype=np.float64):
        return cls({
            path: LayerStatistics(np.array(entry["mean_t"], dtype=dtype), np.array(entry["var_t"], dtype=dtype),
                                  int(entry["batches_seen"]), int(entry["batch_size_m"]))
            for path, entry in data["layers"].items()
        })

    def to_frame(self):
        rows = [
            {"layer": path, "channel": c, "mean_t": float(stats.mean_t[c]), "var_t": float(stats.var_t[c]),
             "batches_seen": stats.batches_seen, "batch_size_m": stats.batch_size_m}
            for path, stats in self.layers.items() for c in range(stats.mean_t.shape[0])
        ]
        return pd.DataFrame(rows)


@dataclass
class LayerConversion:
    gamma_before: np.ndarray
    gamma_after: np.ndarray
    beta_before: np.ndarray
    beta_after: np.ndarray
    mean_before: np.ndarray
    mean_after: np.ndarray
    var_before: np.ndarray
    var_after: np.ndarray

    def is_identity(self):
        return all(np.array_equal(getattr(self, f"{name}_before"), getattr(self, f"{name}_after"))
                   for name in ("gamma", "beta", "mean", "var"))


@dataclass
class ConversionRecord:
    layers: dict = field(default_factory=dict)
    max_test_mode_discrepancy: float = 0.0

    def is_identity(self):
        return all(layer.is_identity() for layer in self.layers.values())

    def to_dict(self):
        return {
            "max_test_mode_discrepancy": self.max_test_mode_discrepancy,
            "identity": self.is_identity(),
            "layers": {path: {key: value.tolist() for key, value in vars(layer).items()}
                       for path, layer in self.layers.items()},
        }

    def to_frame(self):
        rows = []
        for path, layer in self.layers.items():
            for c in range(layer.gamma_before.shape[0]):
                row = {"layer": path, "channel": c}
                row.update({key: float(value[c]) for key, value in vars(layer).items()})
                rows.append(row)
        return pd.DataFrame(rows)


def _batch_features(batch):
    return getattr(batch, "features", batch)


def estimate_target_statistics(net, target_batches):
    """Test-mode pass over target batches, recording every BN input.

    Deeper BN layers see inputs normalized with the source statistics.
    """
    bn_paths = [path for path, _ in net.bn_layers()]
    if not bn_paths:
        raise ConfigError("network has no BN layers")
    batch_list = [np.asarray(_batch_features(batch)) for batch in target_batches]
    if not batch_list:
        raise DataError("no target batches to estimate statistics from")
    m = batch_list[0].shape[0]
    if m < 2:
        raise ShapeError(f"degenerate batch: statistics need m >= 2, got {m}")
    if any(batch.shape[0] != m for batch in batch_list):
        raise ShapeError("target batches must all have the same size m (drop the last incomplete batch)")

    means = {path: [] for path in bn_paths}
    variances = {path: [] for path in bn_paths}
    for batch in batch_list:
        x = ensure_finite(np.ascontiguousarray(batch), "target batch")
        for part, layers in net.parts():
            for index, layer in enumerate(layers):
                if layer.kind == "batchnorm":
                    path = f"{part}.{index}"
                    mu = x.mean(axis=0)
                    centered = x - mu
                    means[path].append(mu)
                    variances[path].append((centered * centered).mean(axis=0))
                    x = layer.forward_test(x)
                else:
                    x, _ = layer.forward(x)

    layers = {}
    for path in bn_paths:
        mean_t = np.mean(np.stack(means[path]), axis=0)
        var_t = np.maximum((m / (m - 1)) * np.mean(np.stack(variances[path]), axis=0), 0.0)
        layers[path] = LayerStatistics(mean_t, var_t, len(batch_list), m)
    logger.info("Estimated target statistics for %d BN layers over %d batches of %d", len(bn_paths), len(batch_list), m)
    return TargetStatistics(layers)


def convert_bn(net, stats, probe_batches=None):
    """Rewrite every BN layer of ``net`` in place to the target statistics.

    With ``probe_batches`` the returned record carries the measured
    test-mode discrepancy between the network before and after conversion.
    """
    bn_layers = net.bn_layers()
    if not bn_layers:
        raise ConfigError("network has no BN layers")
    missing = [path for path, _ in bn_layers if path not in stats.layers]
    if missing:
        raise ConfigError(f"target statistics do not cover BN layers {missing}")
    before = net.copy() if probe_batches is not None else None

    record = ConversionRecord()
    for path, layer in bn_layers:
        target = stats[path]
        if target.mean_t.shape != (layer.channels,):
            raise ShapeError(f"{path}: statistics have {target.mean_t.shape[0]} channels, layer has {layer.channels}")
        dtype = layer.gamma.dtype
        mean_t = target.mean_t.astype(dtype)
        var_t = target.var_t.astype(dtype)
        source_scale = np.sqrt(layer.running_var + layer.epsilon)
        ratio = np.sqrt(var_t + layer.epsilon) / source_scale
        gamma_t = layer.gamma * ratio
        beta_t = layer.beta + layer.gamma * (mean_t - layer.running_mean) / source_scale
        record.layers[path] = LayerConversion(
            layer.gamma.copy(), gamma_t.copy(), layer.beta.copy(), beta_t.copy(),
            layer.running_mean.copy(), mean_t.copy(), layer.running_var.copy(), var_t.copy(),
        )
        layer.gamma, layer.beta = gamma_t, beta_t
        layer.running_mean, layer.running_var = mean_t.copy(), var_t.copy()
    net.bn_converted = True

    if before is not None:
        record.max_test_mode_discrepancy = verify_function_preservation(before, net, probe_batches)
    logger.info("Converted %d BN layers (test-mode discrepancy %.3g)", len(bn_layers), record.max_test_mode_discrepancy)
    return record


def verify_function_preservation(net_before, net_after, probe_batches):
    """Max absolute difference of test-mode features and logits over probes."""
    if net_before.architecture() != net_after.architecture():
        raise ConfigError("networks differ in architecture")
    discrepancy = 0.0
    for batch in probe_batches:
        x = np.asarray(_batch_features(batch))
        a = forward(net_before, x, TEST)
        b = forward(net_after, x, TEST)
        discrepancy = max(discrepancy,
                          float(np.max(np.abs(a.features - b.features))),
                          float(np.max(np.abs(a.logits - b.logits))))
    return discrepancy


def check_function_preservation(discrepancy, dtype):
    tolerance = preservation_tolerance(dtype)
    if not discrepancy <= tolerance:
        raise NumericalError(f"BN conversion changed test-mode outputs by {discrepancy:.3g} (tolerance {tolerance:g})")
    return discrepancy
