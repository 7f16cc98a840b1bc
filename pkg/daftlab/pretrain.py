"""Source-domain pretraining: produces the checkpoint every strategy starts from."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from daftlab.errors import ConfigError, NumericalError
from daftlab.nn_core import FEATURE_EXTRACTOR, HEAD, TRAIN, accuracy, build_network
from daftlab.optim import SCHEDULES, SGD, train_epoch
from daftlab.data import epoch_batches
from daftlab.seeding import derive_rng

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    max_epochs: int = 60
    learning_rate: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "constant"
    patience: int = 5

    def validate(self):
        if self.max_epochs < 1 or self.batch_size < 2 or self.patience < 1:
            raise ConfigError("pretrain needs max_epochs >= 1, batch_size >= 2 and patience >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("pretrain learning_rate must be > 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        return self


@dataclass
class PretrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    wall_clock: float = 0.0

    def to_frame(self):
        return pd.DataFrame(self.epochs, columns=["epoch", "train_loss", "source_val_accuracy"])


def pretrain_source(arch, task, config, seed, dtype=np.float64):
    """Train a fresh BN network on ``source_train`` until ``source_val`` plateaus.

    A plateau is ``config.patience`` epochs without a strictly better
    validation accuracy; the best epoch's network is returned.
    """
    config.validate()
    started = time.perf_counter()
    if arch.input_dim != task.feature_dim or arch.class_count != task.class_count:
        raise ConfigError(f"architecture ({arch.input_dim} -> {arch.class_count}) does not fit the task "
                          f"({task.feature_dim} features, {task.class_count} classes)")
    source_train = task.source_train.astype(dtype)
    source_val = task.source_val.astype(dtype)
    net = build_network(arch, derive_rng(seed, "init"), dtype)
    net.seed_lineage = [int(seed)]
    optimizer = SGD(net, {FEATURE_EXTRACTOR: config.learning_rate, HEAD: config.learning_rate},
                    momentum=config.momentum, weight_decay=config.weight_decay)
    steps_per_epoch = len(source_train) // config.batch_size
    total_steps = steps_per_epoch * config.max_epochs
    log = PretrainLog()
    best_accuracy, best_net, stale, step = -np.inf, net.copy(), 0, 0
    for epoch in range(config.max_epochs):
        try:
            loss, step = train_epoch(net, optimizer, epoch_batches(source_train, config.batch_size, seed, epoch),
                                     TRAIN, config.schedule, step, total_steps)
        except NumericalError as err:
            raise NumericalError(f"pretraining diverged in epoch {epoch}: {err}") from err
        val_accuracy = accuracy(net, source_val.features, source_val.labels)
        log.epochs.append({"epoch": epoch, "train_loss": loss, "source_val_accuracy": val_accuracy})
        logger.info("pretrain epoch %d: loss %.4f, source val accuracy %.4f", epoch, loss, val_accuracy)
        if val_accuracy > best_accuracy:
            best_accuracy, best_net, stale = val_accuracy, net.copy(), 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("source validation plateaued after epoch %d", epoch)
                break
    log.wall_clock = time.perf_counter() - started
    return best_net, log
