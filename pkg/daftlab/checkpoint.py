"""
Checkpoint persistence with joblib.

A checkpoint is a joblib pickle of one plain dict:

    format          "daftlab-checkpoint"
    schema_version  1
    dtype           "float64" | "float32"
    architecture    {"feature_extractor": [layer descriptor...], "head": [...]}
                    descriptors: {"kind": "dense", "in_features", "out_features"}
                                 {"kind": "activation", "function"}
                                 {"kind": "batchnorm", "channels", "epsilon", "momentum"}
    tensors         {"<part>.<index>.<name>": ndarray} for every parameter and
                    every BN running statistic
    frozen          sorted list of frozen part names
    bn_converted    whether BN conversion has been applied
    seed_lineage    list of seeds that produced this network
    metadata        free-form JSON-compatible dict

Arrays are stored as numpy arrays, so a save / load round trip is bit-exact.
"""

import logging
import os

import joblib
import numpy as np

from daftlab.errors import ArtifactError, ConfigError
from daftlab.nn_core import Activation, BatchNormLayer, DenseLayer, Network

logger = logging.getLogger(__name__)

FORMAT = "daftlab-checkpoint"
SCHEMA_VERSION = 1


def checkpoint_payload(net, metadata=None):
    return {
        "format": FORMAT,
        "schema_version": SCHEMA_VERSION,
        "dtype": np.dtype(net.dtype).name,
        "architecture": net.architecture(),
        "tensors": {path: np.array(value, copy=True) for path, value in net.state().items()},
        "frozen": sorted(net.frozen),
        "bn_converted": bool(net.bn_converted),
        "seed_lineage": [int(seed) for seed in net.seed_lineage],
        "metadata": dict(metadata or {}),
    }


def _build_layer(path, descriptor, tensors):
    kind = descriptor.get("kind")
    if kind == "dense":
        return DenseLayer(tensors[f"{path}.weight"].copy(), tensors[f"{path}.bias"].copy())
    if kind == "activation":
        return Activation(descriptor["function"])
    if kind == "batchnorm":
        gamma = tensors[f"{path}.gamma"]
        return BatchNormLayer(
            descriptor["channels"],
            gamma=gamma,
            beta=tensors[f"{path}.beta"],
            running_mean=tensors[f"{path}.running_mean"],
            running_var=tensors[f"{path}.running_var"],
            epsilon=descriptor["epsilon"],
            momentum=descriptor["momentum"],
            dtype=gamma.dtype,
        )
    raise ConfigError(f"{path}: unknown layer kind {kind!r}")


def network_from_payload(payload):
    if payload.get("format") != FORMAT:
        raise ConfigError("not a daftlab checkpoint")
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported checkpoint schema {payload.get('schema_version')!r}")
    tensors = payload["tensors"]
    parts = {}
    try:
        for part, descriptors in payload["architecture"].items():
            parts[part] = [_build_layer(f"{part}.{index}", descriptor, tensors)
                           for index, descriptor in enumerate(descriptors)]
    except KeyError as err:
        raise ConfigError(f"checkpoint is missing tensor {err}") from None
    return Network(
        parts.get("feature_extractor", []),
        parts.get("head", []),
        frozen=set(payload.get("frozen", [])),
        bn_converted=bool(payload.get("bn_converted", False)),
        seed_lineage=list(payload.get("seed_lineage", [])),
    )


def save_checkpoint(net, path, metadata=None):
    payload = checkpoint_payload(net, metadata)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        joblib.dump(payload, path)
    except OSError as err:
        raise ArtifactError(f"could not write checkpoint {path}: {err}") from err
    logger.info("Checkpoint saved: %s", path)
    return path


def load_checkpoint(path, with_metadata=False):
    try:
        payload = joblib.load(path)
    except (OSError, EOFError) as err:
        raise ArtifactError(f"could not read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} is not a daftlab checkpoint")
    net = network_from_payload(payload)
    if with_metadata:
        return net, payload.get("metadata", {})
    return net
