"""
Transfer strategies: LP, FT, LP-FT and DAFT.

    strategy  head init  learning rates        BN mode during FT  BN conversion
    FT        random     eta_theta == eta_w    train              no
    LPFT      from LP    eta_theta == eta_w    test               no
    DAFT      zero       eta_theta != eta_w    train              yes

LP only fits an l2-regularized logistic-regression head on frozen features.
Every field can be overridden, which is how the conversion ablation
(``FT`` / ``LPFT`` with conversion, ``DAFT`` without) is expressed.
"""

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import log_loss

from daftlab.bn_convert import check_function_preservation, convert_bn, estimate_target_statistics
from daftlab.data import batches, epoch_batches
from daftlab.errors import ConfigError, DataError, NumericalError
from daftlab.nn_core import (BN_MODES, FEATURE_EXTRACTOR, HEAD, TEST, TRAIN, DenseLayer, accuracy,
                             extract_features)
from daftlab.optim import SCHEDULES, SGD, lr_multiplier, train_epoch
from daftlab.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

LP = "LP"
FT = "FT"
LPFT = "LPFT"
DAFT = "DAFT"
STRATEGIES = (LP, FT, LPFT, DAFT)

ZERO = "zero"
RANDOM = "random"
FROM_LP = "from_lp"
HEAD_INITS = (ZERO, RANDOM, FROM_LP)

DEFAULT_L2_GRID = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]

STRATEGY_DEFAULTS = {
    LP: {"head_init": FROM_LP, "bn_mode_during_ft": TEST, "bn_conversion": False, "eta_theta": 0.0, "eta_w": 0.0},
    FT: {"head_init": RANDOM, "bn_mode_during_ft": TRAIN, "bn_conversion": False, "eta_theta": 0.01},
    LPFT: {"head_init": FROM_LP, "bn_mode_during_ft": TEST, "bn_conversion": False, "eta_theta": 0.001},
    DAFT: {"head_init": ZERO, "bn_mode_during_ft": TRAIN, "bn_conversion": True, "eta_theta": 0.01, "eta_w": 0.1},
}

# learning-rate grids, largest first
DEFAULT_GRIDS = {
    FT: [0.3, 0.1, 0.03, 0.01, 0.003, 0.001, 3e-4, 1e-4],
    LPFT: [1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 3e-7],
    DAFT: [0.1, 0.03, 0.01, 0.003, 0.001, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6],
}
DEFAULT_HEAD_GRID = [10.0, 3.0, 0.3, 0.1]
STAGE1_HEAD_LR = 1.0


@dataclass
class FineTuneConfig:
    strategy: str = FT
    eta_theta: float = 0.01
    eta_w: float = 0.01
    epochs: int = 20
    batch_size: int = 64
    schedule: str = "cosine"
    power: float = 0.9
    head_init: str = RANDOM
    bn_mode_during_ft: str = TRAIN
    bn_conversion: bool = False
    bn_stat_passes: int = 1
    momentum: float = 0.9
    weight_decay: float = 0.0
    l2_grid: list = field(default_factory=lambda: list(DEFAULT_L2_GRID))
    early_stop_metric: str = "id_val_accuracy"
    early_stop_patience: int = None
    max_steps: int = None
    seed: int = 0

    @classmethod
    def for_strategy(cls, strategy, **overrides):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        unknown = set(overrides) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown fine-tune settings {sorted(unknown)}")
        values = dict(STRATEGY_DEFAULTS[strategy])
        values.update(overrides)
        if strategy in (FT, LPFT) and "eta_w" not in overrides:
            values["eta_w"] = values["eta_theta"]
        return cls(strategy=strategy, **values).validate()

    @property
    def separate_rates(self):
        return self.strategy == DAFT

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.eta_theta < 0 or self.eta_w < 0 or not math.isfinite(self.eta_theta + self.eta_w):
            raise ConfigError("learning rates must be finite and non-negative")
        if self.strategy in (FT, LPFT) and self.eta_theta != self.eta_w:
            raise ConfigError(f"{self.strategy} uses a single learning rate (eta_theta == eta_w)")
        if self.epochs < 1 or self.batch_size < 2 or self.bn_stat_passes < 1:
            raise ConfigError("need epochs >= 1, batch_size >= 2 and bn_stat_passes >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.head_init not in HEAD_INITS:
            raise ConfigError(f"unknown head_init {self.head_init!r}")
        if self.bn_mode_during_ft not in BN_MODES:
            raise ConfigError(f"unknown bn_mode_during_ft {self.bn_mode_during_ft!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.early_stop_metric != "id_val_accuracy":
            raise ConfigError("early stopping is only supported on ID validation accuracy")
        if not self.l2_grid or any(l2 <= 0 for l2 in self.l2_grid):
            raise ConfigError("l2_grid must be a non-empty list of positive values")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        return self

    def resolved_head_init(self, net):
        if self.head_init == ZERO and sum(layer.kind == "dense" for layer in net.head) > 1:
            logger.info("multi-layer head: using random instead of zero initialization")
            return RANDOM
        return self.head_init

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    best_epoch: int = -1
    wall_clock: float = 0.0
    stage: str = "finetune"

    @property
    def best_accuracy(self):
        if self.best_epoch < 0:
            return -math.inf
        return self.entries[self.best_epoch]["val_accuracy"]

    def to_frame(self):
        frame = pd.DataFrame(self.entries)
        frame["best"] = frame.index == self.best_epoch
        return frame


@dataclass
class LinearProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    l2: float
    log: TrainLog
    val_accuracy: float


@dataclass
class StrategyResult:
    strategy: str
    network: object
    log: TrainLog
    baseline: object
    config: FineTuneConfig
    conversion: object = None
    statistics: object = None
    linear_probe: LinearProbeResult = None


def _argmax_earliest(values):
    best = 0
    for i, value in enumerate(values):
        if value > values[best]:
            best = i
    return best


def _linear_head(classifier, class_count):
    coef = classifier.coef_
    intercept = classifier.intercept_
    if coef.shape[0] == 1:
        # binary: softmax over [-z/2, z/2] reproduces sigmoid(z)
        return np.vstack([-coef / 2.0, coef / 2.0]), np.array([-intercept[0] / 2.0, intercept[0] / 2.0])
    return coef.copy(), intercept.copy()


def run_linear_probe(net, data, l2_grid, max_iter=2000, tol=1e-8):
    """Fit an l2-regularized multinomial logistic head on frozen test-mode features.

    ``l2`` is the penalty on the summed log-loss (``C = 1 / l2``); the value
    with the best ID validation accuracy wins, earliest on ties.
    """
    if not l2_grid:
        raise ConfigError("l2_grid is empty")
    started = time.perf_counter()
    class_count = net.class_count
    train_x = extract_features(net, data.target_train.features)
    val_x = extract_features(net, data.target_val.features)
    train_y, val_y = data.target_train.labels, data.target_val.labels
    present = np.unique(train_y)
    if present.shape[0] != class_count or not np.array_equal(present, np.arange(class_count)):
        raise DataError(f"linear probe needs every one of {class_count} classes in target_train")

    log = TrainLog(stage="linear_probe")
    heads = []
    for index, l2 in enumerate(l2_grid):
        if l2 <= 0:
            raise ConfigError(f"l2 strength must be > 0, got {l2}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            classifier = LogisticRegression(C=1.0 / l2, max_iter=max_iter, tol=tol).fit(train_x, train_y)
        weight, bias = _linear_head(classifier, class_count)
        val_accuracy = float(np.mean(np.argmax(val_x @ weight.T + bias, axis=1) == val_y))
        train_loss = float(log_loss(train_y, classifier.predict_proba(train_x), labels=np.arange(class_count)))
        heads.append((weight, bias))
        log.entries.append({"epoch": index, "l2": float(l2), "train_loss": train_loss,
                            "val_accuracy": val_accuracy, "eta_theta": 0.0, "eta_w": 0.0})
    log.best_epoch = _argmax_earliest([entry["val_accuracy"] for entry in log.entries])
    log.wall_clock = time.perf_counter() - started
    weight, bias = heads[log.best_epoch]
    chosen = log.entries[log.best_epoch]
    logger.info("linear probe: l2=%g, ID val accuracy %.4f", chosen["l2"], chosen["val_accuracy"])
    return LinearProbeResult(weight, bias, chosen["l2"], log, chosen["val_accuracy"])


def install_head(net, weight, bias):
    """Replace the head by a single dense layer ``(weight, bias)``."""
    net.head = [DenseLayer(np.array(weight, dtype=net.dtype), np.array(bias, dtype=net.dtype))]
    return net


def initialize_head(net, policy, rng):
    """Re-initialize every dense layer of the head in place.

    ``zero`` sets weights and biases to zero for a single-layer head and falls
    back to ``random`` for deeper heads.
    """
    dense_count = sum(layer.kind == "dense" for layer in net.head)
    if policy == ZERO and dense_count > 1:
        policy = RANDOM
    if policy not in (ZERO, RANDOM):
        raise ConfigError(f"head policy {policy!r} cannot be initialized directly")
    dtype = net.dtype
    head = []
    seen = 0
    for layer in net.head:
        if layer.kind != "dense":
            head.append(layer)
            continue
        seen += 1
        init = ZERO if policy == ZERO else ("normal" if seen == dense_count else "he")
        head.append(DenseLayer.initialize(layer.in_features, layer.out_features, rng, dtype, init=init))
    net.head = head
    return net


def run_fine_tune(net, config, data):
    """SGD on ``target_train`` with per-part learning rates.

    The feature extractor steps with ``eta_theta * schedule(t)`` and the head
    with ``eta_w * schedule(t)``; a part with rate 0 is frozen. Returns a copy
    of the network at the best ID-validation epoch (earliest on ties).
    """
    config.validate()
    if config.bn_conversion and not net.bn_converted:
        raise ConfigError(f"{config.strategy}: BN conversion must be applied before fine-tuning")
    started = time.perf_counter()
    original_frozen = set(net.frozen)
    net = net.copy()
    net.frozen = {part for part, lr in ((FEATURE_EXTRACTOR, config.eta_theta), (HEAD, config.eta_w)) if lr == 0}
    train = data.target_train.astype(net.dtype)
    val = data.target_val.astype(net.dtype)
    steps_per_epoch = len(train) // config.batch_size
    if steps_per_epoch == 0:
        raise DataError(f"target_train has {len(train)} samples, fewer than one batch of {config.batch_size}")
    total_steps = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    optimizer = SGD(net, {FEATURE_EXTRACTOR: config.eta_theta, HEAD: config.eta_w},
                    momentum=config.momentum, weight_decay=config.weight_decay)

    log = TrainLog()
    best_net, best_accuracy, stale, step = None, -math.inf, 0, 0
    for epoch in range(config.epochs):
        if step >= total_steps:
            break
        rates = optimizer.current_rates(lr_multiplier(config.schedule, step, total_steps, config.power))
        loss, step = train_epoch(net, optimizer, epoch_batches(train, config.batch_size, config.seed, epoch),
                                 config.bn_mode_during_ft, config.schedule, step, total_steps,
                                 config.power, total_steps)
        val_accuracy = accuracy(net, val.features, val.labels)
        log.entries.append({"epoch": epoch, "train_loss": loss, "val_accuracy": val_accuracy,
                            "eta_theta": rates[FEATURE_EXTRACTOR], "eta_w": rates[HEAD]})
        logger.debug("%s epoch %d: loss %.4f, ID val accuracy %.4f", config.strategy, epoch, loss, val_accuracy)
        if val_accuracy > best_accuracy:
            best_net, best_accuracy, stale = net.copy(), val_accuracy, 0
            log.best_epoch = epoch
        else:
            stale += 1
            if config.early_stop_patience is not None and stale >= config.early_stop_patience:
                break
    best_net.frozen = original_frozen
    log.wall_clock = time.perf_counter() - started
    logger.info("%s: best epoch %d, ID val accuracy %.4f", config.strategy, log.best_epoch, best_accuracy)
    return best_net, log


def target_statistics_batches(data, config):
    stat_batches = []
    for index in range(config.bn_stat_passes):
        stat_batches += batches(data.target_train, config.batch_size,
                                derive_seed(config.seed, "bn-stats", index), drop_last=True)
    return stat_batches


def run_strategy(pretrained, strategy, data, hyper=None):
    """Run one transfer strategy from a pretrained checkpoint.

    ``hyper`` is a ``FineTuneConfig`` or a dict of overrides for the
    strategy's defaults. The returned ``baseline`` is the network fine-tuning
    started from (after conversion and head initialization).
    """
    if isinstance(hyper, FineTuneConfig):
        config = hyper.validate()
        if config.strategy != strategy:
            raise ConfigError(f"config is for {config.strategy}, not {strategy}")
    else:
        config = FineTuneConfig.for_strategy(strategy, **(hyper or {}))
    data = data.astype(pretrained.dtype)

    if strategy == LP:
        probe = run_linear_probe(pretrained, data, config.l2_grid)
        net = install_head(pretrained.copy(), probe.weight, probe.bias)
        baseline = pretrained.copy()
        if baseline.architecture() != net.architecture():
            # the probe replaced a deeper head, so the linear head starts from zero
            install_head(baseline, np.zeros_like(probe.weight), np.zeros_like(probe.bias))
        return StrategyResult(LP, net, probe.log, baseline, config, linear_probe=probe)

    net = pretrained.copy()
    statistics = conversion = probe = None
    if config.bn_conversion:
        statistics = estimate_target_statistics(net, target_statistics_batches(data, config))
        conversion = convert_bn(net, statistics, probe_batches=[data.target_val.features])
        check_function_preservation(conversion.max_test_mode_discrepancy, net.dtype)

    head_init = config.resolved_head_init(net)
    if head_init == FROM_LP:
        probe = run_linear_probe(net, data, config.l2_grid)
        install_head(net, probe.weight, probe.bias)
    else:
        initialize_head(net, head_init, derive_rng(config.seed, "head"))
    baseline = net.copy()
    tuned, log = run_fine_tune(net, config, data)
    return StrategyResult(strategy, tuned, log, baseline, config, conversion, statistics, probe)


@dataclass
class SweepGrids:
    eta_theta: list
    eta_w: list = field(default_factory=lambda: list(DEFAULT_HEAD_GRID))
    fixed_eta_w: float = STAGE1_HEAD_LR

    @classmethod
    def defaults(cls, strategy, scale=1.0):
        if strategy not in DEFAULT_GRIDS:
            raise ConfigError(f"{strategy} has no learning rates to sweep")
        return cls([eta * scale for eta in DEFAULT_GRIDS[strategy]])


@dataclass
class SweepResult:
    strategy: str
    stage1: list
    chosen_eta_theta: float
    stage2: list
    chosen_eta_w: float

    def to_frame(self):
        rows = [{"stage": 1, "eta_theta": t, "eta_w": w, "val_accuracy": s} for t, w, s in self.stage1]
        rows += [{"stage": 2, "eta_theta": t, "eta_w": w, "val_accuracy": s} for t, w, s in self.stage2]
        frame = pd.DataFrame(rows, columns=["stage", "eta_theta", "eta_w", "val_accuracy"])
        frame["chosen"] = (frame["eta_theta"] == self.chosen_eta_theta) & (frame["eta_w"] == self.chosen_eta_w)
        return frame

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "stage1": [{"eta_theta": t, "eta_w": w, "val_accuracy": s} for t, w, s in self.stage1],
            "chosen_eta_theta": self.chosen_eta_theta,
            "stage2": [{"eta_theta": t, "eta_w": w, "val_accuracy": s} for t, w, s in self.stage2],
            "chosen_eta_w": self.chosen_eta_w,
        }


def score_learning_rates(pretrained, base_config, data, eta_theta, eta_w):
    """Best ID validation accuracy of one sweep cell; a diverged run scores -inf."""
    config = replace(base_config, eta_theta=eta_theta, eta_w=eta_w)
    try:
        return run_strategy(pretrained, config.strategy, data, config).log.best_accuracy
    except NumericalError as err:
        logger.warning("sweep cell eta_theta=%g eta_w=%g diverged: %s", eta_theta, eta_w, err)
        return -math.inf


def _select(values, scores):
    """Argmax of ``scores``; ties go to the smaller learning rate."""
    best = None
    for value, score in sorted(zip(values, scores), key=lambda pair: pair[0]):
        if best is None or score > best[1]:
            best = (value, score)
    return best[0]


def _score_cells(scorer, pairs, n_jobs):
    return Parallel(n_jobs=n_jobs)(delayed(scorer)(eta_theta, eta_w) for eta_theta, eta_w in pairs)


def sweep_learning_rates(pretrained, strategy, data, grids=None, base_config=None, scorer=None, n_jobs=1):
    """Two-step learning-rate sweep.

    Stage 1 sweeps ``eta_theta`` with ``eta_w`` fixed (1.0 by default; equal to
    ``eta_theta`` for single-rate strategies). Stage 2 keeps the chosen
    ``eta_theta`` and sweeps ``eta_w`` over its grid plus the stage-1 value.
    ``scorer(eta_theta, eta_w)`` defaults to training the strategy.
    """
    if strategy == LP:
        raise ConfigError("LP has no learning rates to sweep")
    grids = grids or SweepGrids.defaults(strategy)
    base = base_config or FineTuneConfig.for_strategy(strategy)
    if base.strategy != strategy:
        raise ConfigError(f"base config is for {base.strategy}, not {strategy}")
    if not grids.eta_theta or (base.separate_rates and not grids.eta_w):
        raise ConfigError("learning-rate grids must not be empty")
    if scorer is None:
        scorer = partial(score_learning_rates, pretrained, base, data)

    if base.separate_rates:
        stage1_pairs = [(eta, grids.fixed_eta_w) for eta in grids.eta_theta]
    else:
        stage1_pairs = [(eta, eta) for eta in grids.eta_theta]
    stage1 = [(t, w, float(s)) for (t, w), s in zip(stage1_pairs, _score_cells(scorer, stage1_pairs, n_jobs))]
    chosen_theta = _select([t for t, _, _ in stage1], [s for _, _, s in stage1])
    logger.info("%s sweep stage 1: eta_theta=%g", strategy, chosen_theta)
    if not base.separate_rates:
        return SweepResult(strategy, stage1, chosen_theta, [], chosen_theta)

    head_grid = list(dict.fromkeys(list(grids.eta_w) + [grids.fixed_eta_w]))
    known = {w: s for t, w, s in stage1 if t == chosen_theta}
    pending = [w for w in head_grid if w not in known]
    known.update(zip(pending, (float(s) for s in _score_cells(scorer, [(chosen_theta, w) for w in pending], n_jobs))))
    stage2 = [(chosen_theta, w, known[w]) for w in head_grid]
    chosen_w = _select(head_grid, [known[w] for w in head_grid])
    logger.info("%s sweep stage 2: eta_w=%g", strategy, chosen_w)
    return SweepResult(strategy, stage1, chosen_theta, stage2, chosen_w)
