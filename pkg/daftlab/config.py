"""
Experiment configuration.

One JSON document drives every subcommand::

    {
      "schema_version": 1,
      "task": {...TaskSpec, "shift": {...ShiftDescriptor}},
      "architecture": {...ArchitectureSpec},
      "pretrain": {...PretrainConfig},
      "strategies": ["LP", "FT", "LPFT", "DAFT"],
      "finetune": {"common": {...}, "DAFT": {...}},
      "sweep": {"enabled": false, "grid_scale": 1.0, "eta_theta": {}, "eta_w": [...], "fixed_eta_w": 1.0},
      "seeds": [0],
      "output_dir": "artifacts",
      "precision": "float64",
      "corruption_eval": false,
      "ablation": false,
      "histogram_bins": 50,
      "n_jobs": 1,
      "tracking": {"enabled": false, "experiment": null}
    }

Missing keys take their defaults; unknown keys are rejected.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields

from daftlab.data import ShiftDescriptor, TaskSpec
from daftlab.errors import ConfigError
from daftlab.finetune import DAFT, DEFAULT_HEAD_GRID, FT, LP, LPFT, STAGE1_HEAD_LR, STRATEGIES, FineTuneConfig, SweepGrids
from daftlab.nn_core import DTYPES, ArchitectureSpec
from daftlab.pretrain import PretrainConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# run bookkeeping, excluded from every result digest
RUN_CONTROL_FIELDS = ("strategies", "seeds", "ablation", "output_dir", "n_jobs", "tracking")
PRETRAIN_FIELDS = ("schema_version", "task", "architecture", "pretrain", "precision")

# cell name -> (strategy, bn_conversion)
ABLATION_CELLS = {
    "FT+BN": (FT, True),
    "LPFT+BN": (LPFT, True),
    "DAFT-BN": (DAFT, False),
}


@dataclass
class SweepConfig:
    enabled: bool = False
    grid_scale: float = 1.0
    eta_theta: dict = field(default_factory=dict)
    eta_w: list = field(default_factory=lambda: list(DEFAULT_HEAD_GRID))
    fixed_eta_w: float = STAGE1_HEAD_LR

    def grids(self, strategy):
        if strategy in self.eta_theta:
            return SweepGrids([eta * self.grid_scale for eta in self.eta_theta[strategy]],
                              list(self.eta_w), self.fixed_eta_w)
        grids = SweepGrids.defaults(strategy, self.grid_scale)
        return SweepGrids(grids.eta_theta, list(self.eta_w), self.fixed_eta_w)


@dataclass
class TrackingConfig:
    enabled: bool = False
    experiment: str = None


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    task: TaskSpec = field(default_factory=TaskSpec)
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    finetune: dict = field(default_factory=dict)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "artifacts"
    precision: str = "float64"
    corruption_eval: bool = False
    ablation: bool = False
    histogram_bins: int = 50
    n_jobs: int = 1
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version!r}")
        self.task.validate()
        self.architecture.validate()
        self.pretrain.validate()
        if self.architecture.input_dim != self.task.feature_dim or self.architecture.class_count != self.task.class_count:
            raise ConfigError("architecture input_dim / class_count must match the task")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if any(not isinstance(seed, int) or seed < 0 for seed in self.seeds) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct non-negative integers")
        if not self.strategies or not set(self.strategies) <= set(STRATEGIES) \
                or len(set(self.strategies)) != len(self.strategies):
            raise ConfigError(f"strategies must be distinct values from {STRATEGIES}")
        unknown = set(self.finetune) - {"common", *STRATEGIES}
        if unknown:
            raise ConfigError(f"unknown finetune sections {sorted(unknown)}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")
        if self.histogram_bins < 1:
            raise ConfigError("histogram_bins must be >= 1")
        if self.n_jobs == 0 or self.n_jobs < -1:
            raise ConfigError("n_jobs must be >= 1, or -1 for all cores")
        if self.sweep.grid_scale <= 0 or self.sweep.fixed_eta_w <= 0:
            raise ConfigError("sweep.grid_scale and sweep.fixed_eta_w must be > 0")
        if set(self.sweep.eta_theta) - (set(STRATEGIES) - {LP}):
            raise ConfigError("sweep.eta_theta keys must be strategy names")
        for cell, strategy, overrides in self.cells():
            FineTuneConfig.for_strategy(strategy, **overrides)
        return self

    def finetune_overrides(self, strategy, seed=None):
        overrides = dict(self.finetune.get("common", {}))
        overrides.update(self.finetune.get(strategy, {}))
        if seed is not None:
            overrides["seed"] = seed
        return overrides

    def cells(self):
        """``(cell name, strategy, overrides)`` for every trained cell."""
        cells = [(strategy, strategy, self.finetune_overrides(strategy)) for strategy in self.strategies]
        if self.ablation:
            for name, (strategy, conversion) in ABLATION_CELLS.items():
                if strategy in self.strategies:
                    overrides = self.finetune_overrides(strategy)
                    overrides["bn_conversion"] = conversion
                    cells.append((name, strategy, overrides))
        return cells

    def cell(self, name):
        for cell in self.cells():
            if cell[0] == name:
                return cell
        raise ConfigError(f"unknown cell {name!r}; configured cells: {[c[0] for c in self.cells()]}")

    def to_dict(self):
        return asdict(self)

    def result_dict(self):
        """The settings that change what a run computes."""
        data = self.to_dict()
        for key in RUN_CONTROL_FIELDS:
            data.pop(key)
        return data

    def config_hash(self):
        return _digest(self.result_dict())

    def pretrain_fingerprint(self, seed):
        data = {key: value for key, value in self.result_dict().items() if key in PRETRAIN_FIELDS}
        return _digest(dict(data, seed=int(seed)))

    def cell_fingerprint(self, cell, seed):
        """Digest of everything one (cell, seed) result depends on, pretraining included."""
        _, strategy, overrides = self.cell(cell)
        data = {key: value for key, value in self.result_dict().items() if key not in ("finetune", "sweep")}
        sweep = None
        if self.sweep.enabled and strategy != LP:
            sweep = asdict(self.sweep.grids(strategy))
        return _digest(dict(data, cell=cell, strategy=strategy, overrides=overrides, sweep=sweep, seed=int(seed)))


def _canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _digest(data):
    return hashlib.sha256(_canonical_json(data).encode("utf-8")).hexdigest()


def _build(cls, data, section, nested=None):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    values = dict(data)
    for key, (nested_cls, nested_section) in (nested or {}).items():
        if key in values:
            values[key] = _build(nested_cls, values[key], nested_section)
    try:
        return cls(**values)
    except TypeError as err:
        raise ConfigError(f"invalid {section}: {err}") from err


def config_from_dict(data):
    """Build and validate an ``ExperimentConfig`` from parsed JSON."""
    config = _build(ExperimentConfig, data, "config", {
        "task": (TaskSpec, "task"),
        "architecture": (ArchitectureSpec, "architecture"),
        "pretrain": (PretrainConfig, "pretrain"),
        "sweep": (SweepConfig, "sweep"),
        "tracking": (TrackingConfig, "tracking"),
    })
    if isinstance(config.task.shift, dict):
        config.task.shift = _build(ShiftDescriptor, config.task.shift, "task.shift")
    return config.validate()


def load_config(path=None):
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}") from err
    config = config_from_dict(data)
    logger.info("Loaded config %s (hash %s)", path, config.config_hash()[:12])
    return config
