#!/usr/bin/env python3
"""Tests for feature similarity, relative change, corruption error and method comparison."""

import math

import numpy as np
import pytest

from daftlab.data import CORRUPTION_FAMILIES, CorruptionSpec, LabeledSet, TaskSpec, generate_task
from daftlab.diagnostics import (POST_CONVERSION, RunMetrics, compare_strategies, corruption_error,
                                 feature_similarity, method_comparison, relative_change)
from daftlab.errors import ConfigError, ShapeError
from daftlab.finetune import install_head
from daftlab.nn_core import FEATURE_EXTRACTOR, HEAD, ArchitectureSpec, DenseLayer, Network, build_network


def linear_extractor(weight):
    weight = np.asarray(weight, dtype=float)
    return Network([DenseLayer(weight, np.zeros(weight.shape[0]))],
                   [DenseLayer(np.eye(2, weight.shape[0]), np.zeros(2))])


def probe_set(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledSet(rng.normal(size=(n, 2)), rng.integers(0, 2, n), np.arange(100, 100 + n))


def test_identical_networks_are_perfectly_similar():
    net = linear_extractor(np.eye(2))
    report = feature_similarity(net, net.copy(), probe_set())
    np.testing.assert_allclose(report.cosine, 1.0, atol=1e-12)
    np.testing.assert_array_equal(report.l2, 0.0)
    assert report.summary()["cosine_median"] == pytest.approx(1.0)


def test_scaled_features_keep_direction():
    data = probe_set()
    report = feature_similarity(linear_extractor(np.eye(2)), linear_extractor(2 * np.eye(2)), data)
    np.testing.assert_allclose(report.cosine, 1.0, atol=1e-12)
    np.testing.assert_allclose(report.l2, np.linalg.norm(data.features, axis=1), rtol=1e-12)


def test_orthogonal_features():
    data = LabeledSet(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), np.array([0, 1]))
    rotated = linear_extractor([[0.0, -1.0], [1.0, 0.0]])
    report = feature_similarity(linear_extractor(np.eye(2)), rotated, data)
    np.testing.assert_allclose(report.cosine, 0.0, atol=1e-15)
    np.testing.assert_allclose(report.l2, math.sqrt(2.0))


def test_zero_feature_vectors_get_zero_cosine():
    data = probe_set(10)
    report = feature_similarity(linear_extractor(np.zeros((2, 2))), linear_extractor(np.eye(2)), data)
    np.testing.assert_array_equal(report.cosine, 0.0)
    assert report.zero_feature_count == 10


def test_feature_dimension_mismatch():
    wide = Network([DenseLayer(np.ones((3, 2)), np.zeros(3))], [DenseLayer(np.ones((2, 3)), np.zeros(2))])
    with pytest.raises(ShapeError):
        feature_similarity(linear_extractor(np.eye(2)), wide, probe_set())


def test_histograms_count_every_sample_and_ignore_order():
    rng = np.random.default_rng(3)
    data = probe_set(60, seed=3)
    pre = linear_extractor(np.eye(2))
    post = linear_extractor(rng.normal(size=(2, 2)))
    report = feature_similarity(pre, post, data, bins=7)
    counts, edges = report.cosine_histogram()
    assert counts.sum() == 60 and len(edges) == 8
    assert report.l2_histogram()[0].sum() == 60

    order = rng.permutation(60)
    shuffled = feature_similarity(pre, post, data.subset(order), bins=7)
    np.testing.assert_array_equal(shuffled.cosine_histogram()[0], counts)
    np.testing.assert_array_equal(shuffled.l2_histogram()[0], report.l2_histogram()[0])
    assert len(report.histogram_frame()) == 7


def test_ranking_lists_sample_ids_per_class():
    data = probe_set(30)
    report = feature_similarity(linear_extractor(np.eye(2)), linear_extractor([[1.0, 0.5], [0.0, 1.0]]), data,
                                rank_count=3)
    ranking = report.ranking()
    assert set(ranking) == set(np.unique(data.labels).tolist())
    for label, ranks in ranking.items():
        members = set(data.sample_ids[data.labels == label].tolist())
        assert set(ranks["highest"]) <= members and len(ranks["lowest"]) == 3
        assert report.to_frame().set_index("sample_id").loc[ranks["highest"][0], "cosine"] >= \
            report.to_frame().set_index("sample_id").loc[ranks["lowest"][0], "cosine"]


def test_relative_change_hand_value_and_undefined_baseline():
    before = Network([], [DenseLayer(np.array([[3.0, 4.0]]), np.zeros(1))])
    after = Network([], [DenseLayer(np.array([[6.0, 8.0]]), np.ones(1))])
    report = relative_change(before, after, baseline=POST_CONVERSION)
    assert report["head.0.weight"].value == pytest.approx(1.0)
    assert report["head.0.weight"].log10 == pytest.approx(0.0)
    assert not report["head.0.bias"].defined
    assert report.to_dict()["tensors"][0]["value"] == "undefined"
    assert set(report.to_frame()["baseline"]) == {POST_CONVERSION}


def test_relative_change_of_linear_probe_is_zero_on_feature_extractor():
    net = build_network(ArchitectureSpec(input_dim=3, hidden=[4], class_count=2), np.random.default_rng(0))
    probed = install_head(net.copy(), np.ones((2, 4)), np.array([0.5, -0.5]))
    report = relative_change(net, probed)
    assert report.mean(part=FEATURE_EXTRACTOR) == 0.0
    assert report.mean("statistic") == 0.0
    assert report.mean(part=HEAD) > 0.0
    assert report.to_frame()["part"].iloc[0] == FEATURE_EXTRACTOR


def test_relative_change_needs_matching_architectures():
    a = build_network(ArchitectureSpec(input_dim=3, hidden=[4], class_count=2), np.random.default_rng(0))
    b = build_network(ArchitectureSpec(input_dim=3, hidden=[5], class_count=2), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        relative_change(a, b)


@pytest.fixture(scope="module")
def task():
    spec = TaskSpec(feature_dim=3, class_count=3, source_train=30, source_val=10, target_train=30,
                    target_val=10, target_test=200, ood_size=10)
    return generate_task(spec, seed=4)


def test_severity_zero_matches_clean_error(task):
    net = build_network(ArchitectureSpec(input_dim=3, hidden=[6], class_count=3), np.random.default_rng(1))
    specs = [CorruptionSpec(family, severity) for family in CORRUPTION_FAMILIES for severity in (0, 2)]
    table = corruption_error(net, task, specs, seed=3)
    frame = table.to_frame()
    clean = frame[frame["severity"] == 0]
    assert len(clean) == len(CORRUPTION_FAMILIES)
    assert (clean["error"] == table.clean_error).all()
    assert set(table.family_means()) == set(CORRUPTION_FAMILIES)
    again = corruption_error(net, task, specs, seed=3)
    assert again.rows == table.rows


def test_constant_classifier_has_constant_error(task):
    constant = Network([], [DenseLayer(np.zeros((3, 3)), np.array([5.0, 0.0, 0.0]))])
    table = corruption_error(constant, task, seed=0)
    expected = 1.0 - np.mean(task.target_test_id.labels == 0)
    for row in table.rows:
        assert row["error"] == pytest.approx(expected)
    assert table.mean_corruption_error == pytest.approx(expected)


def make_run(strategy, seed, **metrics):
    values = dict(id_accuracy=0.8, ood_accuracy=0.6, median_cosine=0.9, median_l2=1.0, mean_relative_change=0.1,
                  statistic_relative_change=0.2, head_relative_change=0.5)
    values.update(metrics)
    return RunMetrics(strategy, seed, **values)


def test_self_comparison_is_a_draw():
    runs = [make_run("A", seed) for seed in range(3)]
    pair = compare_strategies(runs, [make_run("B", seed) for seed in range(3)])
    for metric, deltas in pair.deltas.items():
        np.testing.assert_array_equal(deltas, 0.0)
        assert pair.win_rate(metric) == 0.5


def test_comparison_respects_metric_direction():
    pair = compare_strategies([make_run("DAFT", 0, median_cosine=0.95, median_l2=0.5)],
                              [make_run("FT", 0, median_cosine=0.7, median_l2=2.0)])
    assert pair.wins["median_cosine"] == 1.0
    assert pair.wins["median_l2"] == 1.0
    assert pair.deltas["median_l2"][0] == pytest.approx(-1.5)


def test_comparison_rejects_mismatched_seeds():
    with pytest.raises(ConfigError):
        compare_strategies([make_run("A", 0)], [make_run("B", 1)])
    with pytest.raises(ConfigError):
        method_comparison([make_run("A", 0), make_run("B", 1)])
    with pytest.raises(ConfigError):
        method_comparison([make_run("A", 0)])


def test_method_comparison_covers_ordered_pairs():
    runs = [make_run(strategy, seed, ood_accuracy=0.5 + 0.1 * i)
            for i, strategy in enumerate(["LP", "FT", "DAFT"]) for seed in (0, 1)]
    summary = method_comparison(runs)
    assert len(summary.pairs) == 6
    assert summary.pair("DAFT", "LP").wins["ood_accuracy"] == 2.0
    assert summary.pair("LP", "DAFT").wins["ood_accuracy"] == 0.0
    assert len(summary.deltas_frame()) == 6 * 6 * 2


def test_run_metrics_dict_round_trip():
    run = make_run("DAFT", 2, mean_corruption_error=0.25)
    assert RunMetrics.from_dict(run.to_dict()) == run
