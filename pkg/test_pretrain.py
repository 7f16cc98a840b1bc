#!/usr/bin/env python3
"""Tests for source pretraining and the BN statistics it leaves behind."""

import numpy as np
import pytest

from daftlab.bn_convert import estimate_target_statistics
from daftlab.data import ShiftDescriptor, TaskSpec, batches, generate_task
from daftlab.errors import ConfigError
from daftlab.nn_core import ArchitectureSpec
from daftlab.pretrain import PretrainConfig, pretrain_source

INPUT_BN = "feature_extractor.0"


def task_spec(**overrides):
    values = dict(feature_dim=4, class_count=3, source_train=3000, source_val=300, target_train=2000,
                  target_val=50, target_test=50, ood_size=50)
    values.update(overrides)
    return TaskSpec(**values)


ARCH = ArchitectureSpec(input_dim=4, hidden=[16], class_count=3)


@pytest.fixture(scope="module")
def separable():
    task = generate_task(task_spec(class_separation=8.0, cluster_std=0.5), seed=3)
    net, log = pretrain_source(ARCH, task, PretrainConfig(max_epochs=20, batch_size=32), seed=3)
    return task, net, log


def test_well_separated_source_is_learned(separable):
    _, _, log = separable
    assert log.epochs[log.best_epoch]["source_val_accuracy"] >= 0.95
    assert len(log.to_frame()) == len(log.epochs)


def test_running_statistics_track_the_source_features(separable):
    task, net, _ = separable
    layer = net.feature_extractor[0]
    features = task.source_train.features
    std = features.std(axis=0)
    assert np.all(np.abs(layer.running_mean - features.mean(axis=0)) <= 0.15 * std)
    np.testing.assert_allclose(layer.running_var, features.var(axis=0, ddof=1), rtol=0.3)


def test_same_seed_gives_identical_checkpoint():
    task = generate_task(task_spec(source_train=400), seed=5)
    config = PretrainConfig(max_epochs=3, batch_size=32)
    first, first_log = pretrain_source(ARCH, task, config, seed=5)
    second, second_log = pretrain_source(ARCH, task, config, seed=5)
    assert first.state().keys() == second.state().keys()
    for path, value in first.state().items():
        np.testing.assert_array_equal(value, second.state()[path], err_msg=path)
    assert first_log.epochs == second_log.epochs


def test_mean_shift_shows_up_in_target_statistics():
    shift = ShiftDescriptor(rotation_deg=0.0, mean_shift=3.0, scale_jitter=0.0, noise=0.0, direction="uniform")
    task = generate_task(task_spec(cluster_std=1.0, shift=shift), seed=6)
    net, _ = pretrain_source(ARCH, task, PretrainConfig(max_epochs=2, batch_size=32), seed=6)
    stats = estimate_target_statistics(net, batches(task.target_train, 50, shuffle_seed=1, drop_last=True))
    delta = stats[INPUT_BN].mean_t - net.feature_extractor[0].running_mean
    np.testing.assert_allclose(delta, 3.0, atol=0.3)


def test_architecture_must_fit_the_task():
    task = generate_task(task_spec(source_train=100), seed=0)
    with pytest.raises(ConfigError):
        pretrain_source(ArchitectureSpec(input_dim=5, hidden=[4], class_count=3), task, PretrainConfig(), seed=0)
