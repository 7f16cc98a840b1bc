"""SGD with momentum, two learning-rate groups and step-based schedules."""

import logging
import math

import numpy as np

from daftlab.errors import ConfigError, NumericalError
from daftlab.nn_core import FEATURE_EXTRACTOR, HEAD, PARTS, TEST, backward, forward, softmax_cross_entropy

logger = logging.getLogger(__name__)

SCHEDULES = ("cosine", "polynomial", "constant")


def lr_multiplier(schedule, step, total_steps, power=0.9):
    """Multiplier applied to the base learning rate at ``step``.

    ``cosine`` and ``polynomial`` start at 1 for step 0 and reach 0 at
    ``step == total_steps``.
    """
    if schedule not in SCHEDULES:
        raise ConfigError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    if schedule == "constant" or total_steps <= 0:
        return 1.0
    progress = min(max(step / total_steps, 0.0), 1.0)
    if schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * progress))
    return (1.0 - progress) ** power


def part_of(path):
    return path.split(".", 1)[0]


class SGD:
    """Heavy-ball SGD: ``v = mu * v + (g + wd * p)``, ``p -= lr * v``.

    Weight decay applies to dense weights only. Learning rates are given per
    network part (``feature_extractor`` -> eta_theta, ``head`` -> eta_w).
    """

    def __init__(self, net, learning_rates, momentum=0.9, weight_decay=0.0):
        unknown = set(learning_rates) - set(PARTS)
        if unknown:
            raise ConfigError(f"learning rates given for unknown parts {sorted(unknown)}")
        if any(lr < 0 for lr in learning_rates.values()):
            raise ConfigError("learning rates must be non-negative")
        if not 0 <= momentum < 1:
            raise ConfigError(f"SGD momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        self.net = net
        self.learning_rates = dict(learning_rates)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def current_rates(self, multiplier):
        return {part: lr * multiplier for part, lr in self.learning_rates.items()}

    def step(self, bundle, multiplier=1.0):
        params = self.net.parameters()
        for path, grad in bundle.items():
            lr = self.learning_rates.get(part_of(path), 0.0) * multiplier
            param = params[path]
            if self.weight_decay and path.endswith(".weight"):
                grad = grad + self.weight_decay * param
            velocity = self.velocity.get(path)
            velocity = grad.copy() if velocity is None else self.momentum * velocity + grad
            self.velocity[path] = velocity
            param -= (lr * velocity).astype(param.dtype, copy=False)


def train_epoch(net, optimizer, batches, bn_mode, schedule, step, total_steps, power=0.9, max_steps=None):
    """One pass of SGD over ``batches``; returns ``(mean loss, next step)``."""
    losses = []
    trainable = [part for part in PARTS if part not in net.frozen]
    for batch in batches:
        if max_steps is not None and step >= max_steps:
            break
        multiplier = lr_multiplier(schedule, step, total_steps, power)
        try:
            fp = forward(net, batch.features, bn_mode, record=bool(trainable))
            loss, loss_grad = softmax_cross_entropy(fp.logits, batch.labels)
            if not math.isfinite(loss):
                raise NumericalError("non-finite loss")
            if trainable:
                optimizer.step(backward(net, fp.contexts, loss_grad), multiplier)
                for path, value in net.parameters().items():
                    if not np.all(np.isfinite(value)):
                        raise NumericalError(f"non-finite parameter {path}")
        except NumericalError as err:
            rates = optimizer.current_rates(multiplier)
            raise NumericalError(
                f"training diverged at step {step} (eta_theta={rates.get(FEATURE_EXTRACTOR, 0.0):g}, "
                f"eta_w={rates.get(HEAD, 0.0):g}): {err}"
            ) from err
        losses.append(loss)
        step += 1
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return mean_loss, step


def evaluate_loss(net, features, labels):
    loss, _ = softmax_cross_entropy(forward(net, features, TEST).logits, labels)
    return loss
