#!/usr/bin/env python3
"""Tests for target-statistics estimation and function-preserving BN conversion."""

import numpy as np
import pytest

from daftlab.bn_convert import (LayerStatistics, TargetStatistics, check_function_preservation, convert_bn,
                                estimate_target_statistics, preservation_tolerance, verify_function_preservation)
from daftlab.errors import ConfigError, DataError, NumericalError, ShapeError
from daftlab.nn_core import TEST, ArchitectureSpec, BatchNormLayer, DenseLayer, Network, build_network, forward


def single_bn(**kwargs):
    return Network([BatchNormLayer(1, **kwargs)], [])


def stats_for(path, mean, var, batches=1, m=2):
    return TargetStatistics({path: LayerStatistics(np.array(mean, dtype=float), np.array(var, dtype=float), batches, m)})


def random_network(rng, dtype=np.float64):
    bn_layers = int(rng.integers(1, 5))
    spec = ArchitectureSpec(input_dim=4, hidden=[int(rng.integers(3, 7)) for _ in range(max(bn_layers - 1, 1))],
                            class_count=3, input_batchnorm=bn_layers > 1)
    net = build_network(spec, rng, dtype)
    for _, layer in net.bn_layers():
        layer.gamma = rng.uniform(-2.0, 2.0, layer.channels).astype(dtype)
        layer.beta = rng.normal(size=layer.channels).astype(dtype)
        layer.running_mean = rng.normal(size=layer.channels).astype(dtype)
        layer.running_var = rng.uniform(0.5, 5.0, layer.channels).astype(dtype)
    return net


def random_statistics(net, rng):
    return TargetStatistics({
        path: LayerStatistics(rng.normal(size=layer.channels), rng.uniform(0.5, 6.0, layer.channels), 1, 8)
        for path, layer in net.bn_layers()
    })


def test_conversion_spot_values():
    net = single_bn(gamma=[2.0], beta=[1.0], running_mean=[0.0], running_var=[3.0], epsilon=1.0)
    record = convert_bn(net, stats_for("feature_extractor.0", [1.0], [8.0]))
    layer = net.feature_extractor[0]
    assert layer.gamma[0] == 3.0
    assert layer.beta[0] == 2.0
    assert layer.running_mean[0] == 1.0 and layer.running_var[0] == 8.0
    assert net.bn_converted
    assert not record.is_identity()


def test_conversion_without_shift_is_identity():
    net = single_bn(gamma=[1.7], beta=[-0.4], running_mean=[0.3], running_var=[2.2])
    record = convert_bn(net, stats_for("feature_extractor.0", [0.3], [2.2]))
    assert record.is_identity()


def test_zero_gamma_keeps_beta():
    net = single_bn(gamma=[0.0], beta=[0.25], running_mean=[0.0], running_var=[1.0])
    convert_bn(net, stats_for("feature_extractor.0", [5.0], [9.0]))
    assert net.feature_extractor[0].gamma[0] == 0.0
    assert net.feature_extractor[0].beta[0] == 0.25


def test_estimate_two_batch_fixture():
    net = single_bn()
    stats = estimate_target_statistics(net, [np.array([[1.0], [2.0]]), np.array([[3.0], [5.0]])])
    layer = stats["feature_extractor.0"]
    assert layer.mean_t[0] == 2.75
    assert layer.var_t[0] == 1.25
    assert (layer.batches_seen, layer.batch_size_m) == (2, 2)


def test_estimate_single_batch():
    batch = np.array([[1.0], [4.0], [7.0]])
    stats = estimate_target_statistics(single_bn(), [batch])
    assert stats["feature_extractor.0"].mean_t[0] == pytest.approx(4.0)
    assert stats["feature_extractor.0"].var_t[0] == pytest.approx(np.var(batch, ddof=1))


def test_estimate_large_gaussian_sample():
    rng = np.random.default_rng(0)
    samples = rng.normal(3.0, 2.0, (10000, 1))
    stats = estimate_target_statistics(single_bn(), np.split(samples, 100))
    standard_error = 2.0 / np.sqrt(10000)
    assert abs(stats["feature_extractor.0"].mean_t[0] - 3.0) < 3 * standard_error
    assert stats["feature_extractor.0"].var_t[0] == pytest.approx(4.0, rel=0.05)


def test_estimate_does_not_touch_running_statistics():
    rng = np.random.default_rng(1)
    net = random_network(rng)
    before = {path: value.copy() for path, value in net.state().items()}
    estimate_target_statistics(net, [rng.normal(size=(8, 4)) for _ in range(3)])
    for path, value in net.state().items():
        np.testing.assert_array_equal(value, before[path])


def test_estimate_errors():
    with pytest.raises(DataError):
        estimate_target_statistics(single_bn(), [])
    with pytest.raises(ShapeError):
        estimate_target_statistics(single_bn(), [np.ones((2, 1)), np.ones((3, 1))])
    with pytest.raises(ShapeError, match="degenerate batch"):
        estimate_target_statistics(single_bn(), [np.ones((1, 1))])
    with pytest.raises(ConfigError, match="no BN layers"):
        estimate_target_statistics(Network([DenseLayer(np.eye(2), np.zeros(2))], []), [np.ones((2, 2))])


def test_conversion_leaves_non_bn_tensors_untouched():
    rng = np.random.default_rng(7)
    net = random_network(rng)
    converted = net.copy()
    convert_bn(converted, random_statistics(net, rng))
    bn_paths = tuple(f"{path}." for path, _ in net.bn_layers())
    untouched = [path for path in net.state() if not path.startswith(bn_paths)]
    assert untouched
    for path in untouched:
        np.testing.assert_array_equal(converted.state()[path], net.state()[path], err_msg=path)


def test_convert_requires_every_layer():
    net = random_network(np.random.default_rng(2))
    with pytest.raises(ConfigError):
        convert_bn(net, TargetStatistics({}))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_function_preservation_on_random_networks(dtype):
    rng = np.random.default_rng(42)
    instances = 100 if dtype == np.float64 else 20
    for _ in range(instances):
        net = random_network(rng, dtype)
        probes = [rng.normal(size=(16, 4)).astype(dtype)]
        record = convert_bn(net.copy(), random_statistics(net, rng), probe_batches=probes)
        assert record.max_test_mode_discrepancy <= preservation_tolerance(dtype)
        check_function_preservation(record.max_test_mode_discrepancy, dtype)


def test_verification_detects_perturbation():
    rng = np.random.default_rng(3)
    net = random_network(rng)
    converted = net.copy()
    convert_bn(converted, random_statistics(net, rng))
    probes = [rng.normal(size=(10, 4))]
    assert verify_function_preservation(net, converted, probes) <= 1e-9
    converted.bn_layers()[0][1].beta += 0.5
    discrepancy = verify_function_preservation(net, converted, probes)
    assert discrepancy > 0
    with pytest.raises(NumericalError):
        check_function_preservation(discrepancy, np.float64)


def test_verification_architecture_mismatch():
    rng = np.random.default_rng(4)
    a = build_network(ArchitectureSpec(input_dim=4, hidden=[5], class_count=3), rng)
    b = build_network(ArchitectureSpec(input_dim=4, hidden=[6], class_count=3), rng)
    with pytest.raises(ConfigError):
        verify_function_preservation(a, b, [np.ones((2, 4))])


def test_statistics_round_trip_through_dict():
    rng = np.random.default_rng(5)
    net = random_network(rng)
    stats = estimate_target_statistics(net, [rng.normal(size=(8, 4)) for _ in range(2)])
    restored = TargetStatistics.from_dict(stats.to_dict())
    for path, layer in stats.layers.items():
        np.testing.assert_array_equal(restored[path].mean_t, layer.mean_t)
        np.testing.assert_array_equal(restored[path].var_t, layer.var_t)
    assert len(stats.to_frame()) == sum(layer.channels for _, layer in net.bn_layers())


def test_converted_network_matches_target_normalization():
    # after conversion, test-mode BN normalizes target inputs with the target statistics
    rng = np.random.default_rng(6)
    target = rng.normal(2.0, 3.0, (4000, 1))
    net = single_bn()
    stats = estimate_target_statistics(net, np.split(target, 40))
    convert_bn(net, stats)
    layer = net.feature_extractor[0]
    assert layer.running_mean[0] == stats["feature_extractor.0"].mean_t[0]
    out = forward(net, target, TEST).logits
    np.testing.assert_allclose(out, forward(single_bn(), target, TEST).logits, atol=1e-12)
