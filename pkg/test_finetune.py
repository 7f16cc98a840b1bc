#!/usr/bin/env python3
"""Tests for the transfer strategies, the linear probe and the learning-rate sweep."""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from daftlab import finetune
from daftlab.data import TaskSpec, generate_task
from daftlab.diagnostics import relative_change
from daftlab.errors import ConfigError, DataError, NumericalError
from daftlab.finetune import (DAFT, FROM_LP, FT, LP, LPFT, RANDOM, ZERO, FineTuneConfig, SweepGrids,
                              initialize_head, run_fine_tune, run_linear_probe, run_strategy, score_learning_rates,
                              sweep_learning_rates)
from daftlab.nn_core import FEATURE_EXTRACTOR, TEST, TRAIN, ArchitectureSpec, build_network, extract_features
from daftlab.pretrain import PretrainConfig, pretrain_source


@pytest.fixture(scope="module")
def task():
    spec = TaskSpec(feature_dim=4, class_count=3, source_train=300, source_val=100, target_train=200,
                    target_val=100, target_test=100, ood_size=100)
    return generate_task(spec, seed=11)


@pytest.fixture(scope="module")
def pretrained(task):
    arch = ArchitectureSpec(input_dim=4, hidden=[8], class_count=3)
    net, _ = pretrain_source(arch, task, PretrainConfig(max_epochs=3, batch_size=32), seed=11)
    return net


def assert_same_state(a, b):
    state_a, state_b = a.state(), b.state()
    assert set(state_a) == set(state_b)
    for path, value in state_a.items():
        np.testing.assert_array_equal(value, state_b[path], err_msg=path)


def test_strategy_defaults():
    ft = FineTuneConfig.for_strategy(FT)
    assert (ft.head_init, ft.bn_mode_during_ft, ft.bn_conversion) == (RANDOM, TRAIN, False)
    assert ft.eta_theta == ft.eta_w

    lpft = FineTuneConfig.for_strategy(LPFT, eta_theta=1e-5)
    assert (lpft.head_init, lpft.bn_mode_during_ft, lpft.eta_w) == (FROM_LP, TEST, 1e-5)

    daft = FineTuneConfig.for_strategy(DAFT)
    assert (daft.head_init, daft.bn_mode_during_ft, daft.bn_conversion) == (ZERO, TRAIN, True)
    assert daft.separate_rates and daft.eta_w != daft.eta_theta


def test_config_validation():
    with pytest.raises(ConfigError):
        FineTuneConfig.for_strategy("SURGICAL")
    with pytest.raises(ConfigError, match="single learning rate"):
        FineTuneConfig.for_strategy(FT, eta_theta=0.01, eta_w=0.1)
    with pytest.raises(ConfigError):
        FineTuneConfig.for_strategy(DAFT, eta_theta=-1.0)
    with pytest.raises(ConfigError):
        FineTuneConfig.for_strategy(DAFT, head_init="xavier")
    with pytest.raises(ConfigError):
        FineTuneConfig.for_strategy(DAFT, learning_rate=0.1)
    with pytest.raises(ConfigError):
        FineTuneConfig.for_strategy(DAFT, l2_grid=[])


def test_zero_head_falls_back_to_random_for_deep_heads():
    rng = np.random.default_rng(0)
    deep = build_network(ArchitectureSpec(input_dim=4, hidden=[6], class_count=3, head_hidden=[5]), rng)
    assert FineTuneConfig.for_strategy(DAFT).resolved_head_init(deep) == RANDOM
    initialize_head(deep, ZERO, np.random.default_rng(1))
    assert np.any(deep.head[-1].weight != 0)

    shallow = build_network(ArchitectureSpec(input_dim=4, hidden=[6], class_count=3), rng)
    initialize_head(shallow, ZERO, np.random.default_rng(1))
    assert not np.any(shallow.head[0].weight) and not np.any(shallow.head[0].bias)


def test_zero_learning_rates_leave_model_unchanged(pretrained, task):
    config = FineTuneConfig.for_strategy(DAFT, eta_theta=0.0, eta_w=0.0, bn_conversion=False, epochs=2)
    tuned, log = run_fine_tune(pretrained, config, task)
    assert_same_state(tuned, pretrained)
    assert len(log.entries) == 2


def test_conversion_must_precede_fine_tuning(pretrained, task):
    with pytest.raises(ConfigError, match="BN conversion"):
        run_fine_tune(pretrained, FineTuneConfig.for_strategy(DAFT), task)


def test_max_steps_caps_training(pretrained, task):
    config = FineTuneConfig.for_strategy(FT, batch_size=32, max_steps=1)
    _, log = run_fine_tune(pretrained, config, task)
    assert len(log.entries) == 1


def test_early_stop_after_patience_epochs(pretrained, task):
    # frozen rates keep ID val accuracy flat, so the first epoch stays best
    config = FineTuneConfig.for_strategy(DAFT, eta_theta=0.0, eta_w=0.0, bn_conversion=False, epochs=10,
                                         early_stop_patience=2)
    _, log = run_fine_tune(pretrained, config, task)
    assert len(log.entries) == 3
    assert log.best_epoch == 0
    with pytest.raises(ConfigError):
        FineTuneConfig.for_strategy(FT, early_stop_patience=0)


def test_daft_without_its_differences_reduces_to_ft(pretrained, task):
    common = {"epochs": 20, "batch_size": 32, "eta_theta": 0.01, "max_steps": 100}
    ft = run_strategy(pretrained, FT, task, common)
    daft = run_strategy(pretrained, DAFT, task, dict(common, eta_w=0.01, head_init=RANDOM, bn_conversion=False))
    assert_same_state(ft.network, daft.network)
    assert ft.log.entries == daft.log.entries


def test_strategies_are_deterministic(pretrained, task):
    hyper = {"epochs": 2, "batch_size": 32}
    first = run_strategy(pretrained, DAFT, task, hyper)
    second = run_strategy(pretrained, DAFT, task, hyper)
    assert_same_state(first.network, second.network)


def test_lpft_keeps_bn_statistics(pretrained, task):
    result = run_strategy(pretrained, LPFT, task, {"epochs": 2, "batch_size": 32, "eta_theta": 1e-3})
    for path, value in pretrained.statistics().items():
        np.testing.assert_array_equal(result.network.statistics()[path], value)
    assert result.linear_probe is not None
    assert result.conversion is None


def test_daft_converts_and_starts_from_zero_head(pretrained, task):
    result = run_strategy(pretrained, DAFT, task, {"epochs": 2, "batch_size": 32})
    assert result.network.bn_converted
    assert result.conversion.max_test_mode_discrepancy <= 1e-9
    assert not np.any(result.baseline.head[0].weight)
    for path, stats in result.statistics.layers.items():
        np.testing.assert_array_equal(result.baseline.statistics()[f"{path}.running_mean"], stats.mean_t)
    # the pretrained checkpoint is never modified
    assert not pretrained.bn_converted


def test_lp_freezes_feature_extractor(pretrained, task):
    result = run_strategy(pretrained, LP, task)
    for path, value in pretrained.state().items():
        if path.startswith("feature_extractor"):
            np.testing.assert_array_equal(result.network.state()[path], value)
    assert len(result.network.head) == 1
    assert result.linear_probe.l2 in finetune.DEFAULT_L2_GRID
    assert result.log.stage == "linear_probe"


def test_lp_replacing_a_deep_head_keeps_a_comparable_baseline(task):
    deep = build_network(ArchitectureSpec(input_dim=4, hidden=[8], class_count=3, head_hidden=[5]),
                         np.random.default_rng(7))
    result = run_strategy(deep, LP, task)
    assert result.baseline.architecture() == result.network.architecture()
    assert not np.any(result.baseline.head[0].weight)
    change = relative_change(result.baseline, result.network)
    assert change.mean(part=FEATURE_EXTRACTOR) == 0.0


def _oracle_probabilities(features, labels, l2, class_count, query):
    n, d = features.shape
    onehot = np.eye(class_count)[labels]

    def objective(params):
        weight = params[:class_count * d].reshape(class_count, d)
        bias = params[class_count * d:]
        logits = features @ weight.T + bias
        loss = -np.sum(log_softmax(logits, axis=1) * onehot) + 0.5 * l2 * np.sum(weight ** 2)
        residual = softmax(logits, axis=1) - onehot
        grad = np.concatenate([(residual.T @ features + l2 * weight).ravel(), residual.sum(axis=0)])
        return loss, grad

    solution = minimize(objective, np.zeros(class_count * (d + 1)), jac=True, method="L-BFGS-B",
                        options={"gtol": 1e-10, "ftol": 1e-14, "maxiter": 10000})
    weight = solution.x[:class_count * d].reshape(class_count, d)
    return softmax(query @ weight.T + solution.x[class_count * d:], axis=1)


def test_linear_probe_matches_convex_oracle(pretrained, task):
    probe = run_linear_probe(pretrained, task, [1.0])
    train_x = extract_features(pretrained, task.target_train.features)
    val_x = extract_features(pretrained, task.target_val.features)
    expected = _oracle_probabilities(train_x, task.target_train.labels, 1.0, 3, val_x)
    np.testing.assert_allclose(softmax(val_x @ probe.weight.T + probe.bias, axis=1), expected, atol=1e-3)


def test_linear_probe_strong_penalty_predicts_priors(pretrained, task):
    probe = run_linear_probe(pretrained, task, [1e8])
    assert np.abs(probe.weight).max() < 1e-3
    np.testing.assert_allclose(softmax(probe.bias), task.target_train.class_priors(3), atol=1e-2)


def test_linear_probe_selects_by_validation_accuracy(pretrained, task):
    probe = run_linear_probe(pretrained, task, [1e8, 1.0])
    accuracies = [entry["val_accuracy"] for entry in probe.log.entries]
    assert probe.val_accuracy == max(accuracies)
    assert probe.l2 == [1e8, 1.0][accuracies.index(max(accuracies))]


def test_linear_probe_binary_head():
    spec = TaskSpec(feature_dim=3, class_count=2, source_train=50, source_val=20, target_train=80,
                    target_val=40, target_test=20, ood_size=20)
    binary = generate_task(spec, seed=2)
    net = build_network(ArchitectureSpec(input_dim=3, hidden=[4], class_count=2), np.random.default_rng(0))
    probe = run_linear_probe(net, binary, [1.0])
    assert probe.weight.shape == (2, 4)
    np.testing.assert_allclose(probe.weight[0], -probe.weight[1])


def test_linear_probe_needs_every_class(pretrained, task):
    keep = task.target_train.labels != 2
    missing = replace(task, target_train=task.target_train.subset(keep))
    with pytest.raises(DataError):
        run_linear_probe(pretrained, missing, [1.0])


class TableScorer:
    def __init__(self, theta_scores, head_scores):
        self.theta_scores = theta_scores
        self.head_scores = head_scores
        self.calls = []

    def __call__(self, eta_theta, eta_w):
        self.calls.append((eta_theta, eta_w))
        if eta_w in self.head_scores:
            return self.head_scores[eta_w]
        return self.theta_scores[eta_theta]


def test_sweep_two_stage_selection():
    scorer = TableScorer({0.1: 0.5, 0.01: 0.8, 0.001: 0.8}, {10.0: -math.inf, 0.1: 0.9})
    result = sweep_learning_rates(None, DAFT, None, SweepGrids([0.1, 0.01, 0.001], [10.0, 0.1]), scorer=scorer)
    # stage 1 runs with the head rate fixed at 1.0; ties go to the smaller rate
    assert all(eta_w == 1.0 for _, eta_w in scorer.calls[:3])
    assert result.chosen_eta_theta == 0.001
    # the (eta_theta*, 1.0) cell is reused rather than retrained
    assert scorer.calls[3:] == [(0.001, 10.0), (0.001, 0.1)]
    assert result.chosen_eta_w == 0.1
    assert [w for _, w, _ in result.stage2] == [10.0, 0.1, 1.0]
    frame = result.to_frame()
    assert frame["chosen"].sum() == 1


def test_sweep_single_rate_strategy():
    scorer = TableScorer({0.3: 0.2, 0.01: 0.7, 0.001: 0.6}, {})
    result = sweep_learning_rates(None, FT, None, SweepGrids([0.3, 0.01, 0.001]), scorer=scorer)
    assert scorer.calls == [(0.3, 0.3), (0.01, 0.01), (0.001, 0.001)]
    assert result.chosen_eta_theta == result.chosen_eta_w == 0.01
    assert result.stage2 == []


def test_sweep_single_element_grids():
    scorer = TableScorer({0.01: 0.4}, {0.1: 0.4})
    result = sweep_learning_rates(None, DAFT, None, SweepGrids([0.01], [0.1]), scorer=scorer)
    assert result.chosen_eta_theta == 0.01
    assert result.chosen_eta_w == 0.1  # tie with 1.0 goes to the smaller rate


def test_sweep_rejects_lp_and_empty_grids():
    with pytest.raises(ConfigError):
        sweep_learning_rates(None, LP, None, scorer=lambda t, w: 0.0)
    with pytest.raises(ConfigError):
        sweep_learning_rates(None, DAFT, None, SweepGrids([]), scorer=lambda t, w: 0.0)
    with pytest.raises(ConfigError):
        SweepGrids.defaults(LP)


def test_grid_scale_multiplies_defaults():
    scaled = SweepGrids.defaults(DAFT, scale=10.0)
    assert scaled.eta_theta[0] == pytest.approx(1.0)
    assert scaled.eta_w == finetune.DEFAULT_HEAD_GRID


def test_diverged_cell_scores_negative_infinity(monkeypatch):
    def diverge(*args, **kwargs):
        raise NumericalError("training diverged at step 3 (eta_theta=10, eta_w=10)")

    monkeypatch.setattr(finetune, "run_strategy", diverge)
    assert score_learning_rates(None, FineTuneConfig.for_strategy(DAFT), None, 10.0, 10.0) == -math.inf
