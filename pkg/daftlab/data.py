"""
Synthetic domain-shift tasks, parametric corruptions, batching and CSV IO.

The source domain is a class-conditional Gaussian mixture. The target (ID)
domain applies an affine shift to it: a rotation about the data centre, a
per-feature rescale, a mean offset and additive noise. OOD domains apply the
same shift with larger magnitudes. Labels never change under shift.
"""

import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from daftlab.errors import ArtifactError, ConfigError, DataError
from daftlab.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],) \
                or self.sample_ids.shape != self.labels.shape:
            raise DataError(f"{self.name or 'dataset'}: features, labels and sample ids disagree in length")

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def astype(self, dtype):
        return LabeledSet(self.features.astype(dtype), self.labels, self.sample_ids, self.name)

    def subset(self, index):
        return LabeledSet(self.features[index], self.labels[index], self.sample_ids[index], self.name)

    def class_priors(self, class_count):
        return np.bincount(self.labels, minlength=class_count) / len(self)


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray


@dataclass
class ShiftDescriptor:
    rotation_deg: float = 25.0
    mean_shift: float = 1.5
    scale_jitter: float = 0.3
    noise: float = 0.2
    direction: str = "random"

    def validate(self):
        if self.noise < 0 or self.mean_shift < 0 or self.rotation_deg < 0:
            raise ConfigError("shift magnitudes must be non-negative")
        if not 0 <= self.scale_jitter < 1:
            raise ConfigError("scale_jitter must be in [0, 1)")
        if self.direction not in ("random", "uniform"):
            raise ConfigError(f"unknown shift direction {self.direction!r}")
        return self

    def scaled(self, factor):
        return ShiftDescriptor(self.rotation_deg * factor, self.mean_shift * factor,
                               min(self.scale_jitter * factor, 0.95), self.noise * factor, self.direction)

    @property
    def is_identity(self):
        return self.rotation_deg == 0 and self.mean_shift == 0 and self.scale_jitter == 0 and self.noise == 0


@dataclass
class TaskSpec:
    feature_dim: int = 8
    class_count: int = 4
    class_separation: float = 1.25
    cluster_std: float = 1.0
    anisotropy: float = 0.3
    source_train: int = 4000
    source_val: int = 1000
    target_train: int = 2000
    target_val: int = 500
    target_test: int = 1000
    ood_size: int = 1000
    shift: ShiftDescriptor = field(default_factory=ShiftDescriptor)
    # factors past 2 push rotation and jitter to where every strategy is near chance
    ood_levels: dict = field(default_factory=lambda: {"moderate": 1.5, "strong": 2.0})

    def validate(self):
        if self.class_count < 2 or self.feature_dim < 2:
            raise ConfigError("a task needs at least 2 classes and 2 features")
        sizes = (self.source_train, self.source_val, self.target_train, self.target_val, self.target_test, self.ood_size)
        if any(size < 1 for size in sizes):
            raise ConfigError("split sizes must be positive")
        if any(factor <= 0 for factor in self.ood_levels.values()):
            raise ConfigError("ood level factors must be positive")
        self.shift.validate()
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class DomainTransform:
    matrix: np.ndarray
    offset: np.ndarray
    noise: float
    identity: bool

    def apply(self, x, center, rng):
        if self.identity:
            return x.copy()
        shifted = (x - center) @ self.matrix.T + center + self.offset
        if self.noise > 0:
            shifted = shifted + rng.normal(0.0, self.noise, x.shape)
        return shifted


@dataclass
class DomainShiftTask:
    spec: TaskSpec
    seed: int
    source_train: LabeledSet
    source_val: LabeledSet
    target_train: LabeledSet
    target_val: LabeledSet
    target_test_id: LabeledSet
    target_test_ood: dict
    class_means: np.ndarray
    class_stds: np.ndarray
    center: np.ndarray
    transforms: dict

    @property
    def feature_dim(self):
        return self.spec.feature_dim

    @property
    def class_count(self):
        return self.spec.class_count

    @property
    def shift_descriptor(self):
        return self.spec.shift

    @property
    def strong_ood_name(self):
        return max(self.target_test_ood, key=lambda level: (self.spec.ood_levels[level], level))

    def splits(self):
        named = {
            "source_train": self.source_train,
            "source_val": self.source_val,
            "target_train": self.target_train,
            "target_val": self.target_val,
            "target_test_id": self.target_test_id,
        }
        named.update({f"target_test_ood_{level}": split for level, split in self.target_test_ood.items()})
        return named

    def astype(self, dtype):
        return DomainShiftTask(
            self.spec, self.seed,
            self.source_train.astype(dtype), self.source_val.astype(dtype),
            self.target_train.astype(dtype), self.target_val.astype(dtype),
            self.target_test_id.astype(dtype),
            {level: split.astype(dtype) for level, split in self.target_test_ood.items()},
            self.class_means, self.class_stds, self.center, self.transforms,
        )

    def domain_mixture(self, domain):
        """Component means and covariances of ``domain``'s input marginal."""
        covs = np.stack([np.diag(std ** 2) for std in self.class_stds])
        if domain == SOURCE:
            return self.class_means.copy(), covs
        transform = self.transforms[domain]
        if transform.identity:
            return self.class_means.copy(), covs
        a = transform.matrix
        means = (self.class_means - self.center) @ a.T + self.center + transform.offset
        covs = np.stack([a @ cov @ a.T for cov in covs]) + transform.noise ** 2 * np.eye(self.feature_dim)
        return means, covs


def _rotation(dim, angle_deg, basis):
    if angle_deg == 0:
        return np.eye(dim)
    angle = np.deg2rad(angle_deg)
    block = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return basis @ block @ basis.T


def _domain_transform(shift, dim, cluster_std, basis, jitter_direction, offset_direction):
    if shift.is_identity:
        return DomainTransform(np.eye(dim), np.zeros(dim), 0.0, True)
    scale = 1.0 + shift.scale_jitter * jitter_direction
    matrix = _rotation(dim, shift.rotation_deg, basis) @ np.diag(scale)
    offset = shift.mean_shift * cluster_std * offset_direction
    return DomainTransform(matrix, offset, float(shift.noise), False)


def _sample_mixture(rng, n, means, stds):
    labels = rng.integers(0, means.shape[0], n)
    z = rng.standard_normal((n, means.shape[1]))
    return means[labels] + z * stds[labels], labels


def generate_task(spec, seed):
    """Sample a full domain-shift task; fully determined by ``(spec, seed)``."""
    spec.validate()
    k, d = spec.class_count, spec.feature_dim
    if spec.cluster_std <= 0 or not 0 <= spec.anisotropy < 1:
        raise DataError("degenerate covariance: need cluster_std > 0 and anisotropy in [0, 1)")
    rng = derive_rng(seed, "mixture")
    means = rng.normal(0.0, spec.class_separation, (k, d))
    stds = spec.cluster_std * (1.0 + spec.anisotropy * rng.uniform(-1.0, 1.0, (k, d)))
    if np.any(stds <= 0) or not np.all(np.isfinite(stds)):
        raise DataError("degenerate covariance: class standard deviations must be positive")
    center = means.mean(axis=0)

    shift_rng = derive_rng(seed, "shift")
    basis, _ = np.linalg.qr(shift_rng.standard_normal((d, d)))
    jitter_direction = shift_rng.uniform(-1.0, 1.0, d)
    if spec.shift.direction == "uniform":
        offset_direction = np.ones(d)
    else:
        offset_direction = shift_rng.choice([-1.0, 1.0], d)
    transforms = {TARGET: _domain_transform(spec.shift, d, spec.cluster_std, basis, jitter_direction, offset_direction)}
    for level, factor in sorted(spec.ood_levels.items()):
        transforms[f"ood_{level}"] = _domain_transform(spec.shift.scaled(factor), d, spec.cluster_std,
                                                       basis, jitter_direction, offset_direction)

    start = 0

    def split(name, size, domain):
        nonlocal start
        split_rng = derive_rng(seed, "split", name)
        x, y = _sample_mixture(split_rng, size, means, stds)
        if domain != SOURCE:
            x = transforms[domain].apply(x, center, split_rng)
        ids = np.arange(start, start + size)
        start += size
        return LabeledSet(x, y, ids, name)

    task = DomainShiftTask(
        spec=spec,
        seed=int(seed),
        source_train=split("source_train", spec.source_train, SOURCE),
        source_val=split("source_val", spec.source_val, SOURCE),
        target_train=split("target_train", spec.target_train, TARGET),
        target_val=split("target_val", spec.target_val, TARGET),
        target_test_id=split("target_test_id", spec.target_test, TARGET),
        target_test_ood={level: split(f"target_test_ood_{level}", spec.ood_size, f"ood_{level}")
                         for level in sorted(spec.ood_levels)},
        class_means=means,
        class_stds=stds,
        center=center,
        transforms=transforms,
    )
    logger.info("Generated task: %d features, %d classes, seed %d", d, k, seed)
    return task


def _mixture_logpdf(x, means, covs):
    weights = np.log(1.0 / means.shape[0])
    parts = [multivariate_normal(mean, cov).logpdf(x) for mean, cov in zip(means, covs)]
    return logsumexp(np.stack(parts, axis=0) + weights, axis=0)


def estimate_kl_divergence(task, domain=TARGET, samples=20000, seed=0):
    """Monte-Carlo estimate of KL(source input marginal || ``domain`` marginal)."""
    means_p, covs_p = task.domain_mixture(SOURCE)
    means_q, covs_q = task.domain_mixture(domain)
    rng = derive_rng(seed, "kl", domain)
    labels = rng.integers(0, means_p.shape[0], samples)
    x = np.empty((samples, task.feature_dim))
    for c in range(means_p.shape[0]):
        idx = labels == c
        x[idx] = rng.multivariate_normal(means_p[c], covs_p[c], int(idx.sum()))
    return float(np.mean(_mixture_logpdf(x, means_p, covs_p) - _mixture_logpdf(x, means_q, covs_q)))


CORRUPTION_SEVERITIES = {
    # noise standard deviation
    "additive-gaussian": (0.1, 0.2, 0.4, 0.8, 1.6),
    # probability of zeroing a feature
    "feature-dropout": (0.05, 0.1, 0.2, 0.3, 0.5),
    # weight of the 3-neighbour circular average mixed into each feature
    "affine-blur": (0.2, 0.4, 0.6, 0.8, 1.0),
    # contrast factor about the per-sample mean
    "contrast-scale": (0.8, 0.6, 0.4, 0.3, 0.2),
}
CORRUPTION_FAMILIES = tuple(CORRUPTION_SEVERITIES)
MAX_SEVERITY = 5


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    severity: int

    def __post_init__(self):
        if self.family not in CORRUPTION_SEVERITIES:
            raise ConfigError(f"unknown corruption family {self.family!r}; expected one of {CORRUPTION_FAMILIES}")
        if not 0 <= int(self.severity) <= MAX_SEVERITY:
            raise ConfigError(f"corruption severity must be in [0, {MAX_SEVERITY}], got {self.severity}")

    @property
    def parameter(self):
        if self.severity == 0:
            return None
        return CORRUPTION_SEVERITIES[self.family][self.severity - 1]


def all_corruptions(severities=range(1, MAX_SEVERITY + 1)):
    return [CorruptionSpec(family, severity) for family in CORRUPTION_FAMILIES for severity in severities]


def corrupt(labeled_set, spec, seed):
    """Apply ``spec`` to a copy of ``labeled_set``; labels are untouched."""
    x = labeled_set.features
    if spec.severity == 0:
        corrupted = x.copy()
    else:
        value = spec.parameter
        rng = derive_rng(seed, "corrupt", spec.family, spec.severity)
        if spec.family == "additive-gaussian":
            corrupted = x + rng.normal(0.0, value, x.shape)
        elif spec.family == "feature-dropout":
            corrupted = np.where(rng.uniform(size=x.shape) < value, 0.0, x)
        elif spec.family == "affine-blur":
            local = (np.roll(x, 1, axis=1) + x + np.roll(x, -1, axis=1)) / 3.0
            corrupted = (1.0 - value) * x + value * local
        else:
            mean = x.mean(axis=1, keepdims=True)
            corrupted = mean + value * (x - mean)
    return LabeledSet(corrupted.astype(x.dtype, copy=False), labeled_set.labels.copy(),
                      labeled_set.sample_ids.copy(), f"{labeled_set.name}[{spec.family}:{spec.severity}]")


def batches(labeled_set, batch_size, shuffle_seed=None, drop_last=False):
    """Split a set into mini-batches, shuffled when ``shuffle_seed`` is given."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(labeled_set)
    if n == 0:
        raise DataError(f"{labeled_set.name or 'dataset'} is empty")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    return [
        Batch(labeled_set.features[idx], labeled_set.labels[idx], labeled_set.sample_ids[idx])
        for idx in (order[i:i + batch_size] for i in range(0, stop, batch_size))
    ]


def epoch_batches(labeled_set, batch_size, seed, epoch, drop_last=True):
    return batches(labeled_set, batch_size, derive_seed(seed, "shuffle", epoch), drop_last)


@dataclass
class CsvSchema:
    """Decimal text, UTF-8, comma separated, one header row."""

    feature_columns: list = None
    label_column: str = "label"
    sample_id_column: str = "sample_id"


def _parse_numeric(frame, column, integral=False):
    text = frame[column].str.strip()
    try:
        # correctly rounded, so 17-digit exports come back bit-exact
        values = text.astype(np.float64).to_numpy()
    except ValueError:
        values = pd.to_numeric(text, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if integral:
        bad |= np.isfinite(values) & (values != np.round(values))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"line {row + 2}, column {column!r}: cannot parse {frame[column].iloc[row]!r}")
    return values


def load_csv(path, schema=None, dtype=np.float64):
    schema = schema or CsvSchema()
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as err:
        raise ArtifactError(f"dataset not found: {path}") from err
    except pd.errors.EmptyDataError as err:
        raise DataError(f"{path}: empty dataset") from err
    if schema.label_column not in frame.columns:
        raise DataError(f"{path}: missing label column {schema.label_column!r}")
    id_column = schema.sample_id_column if schema.sample_id_column in frame.columns else None
    feature_columns = schema.feature_columns or [c for c in frame.columns if c not in (schema.label_column, id_column)]
    missing = [c for c in feature_columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing feature columns {missing}")
    if frame.empty:
        raise DataError(f"{path}: empty dataset")
    features = np.stack([_parse_numeric(frame, c) for c in feature_columns], axis=1).astype(dtype)
    labels = _parse_numeric(frame, schema.label_column, integral=True).astype(np.int64)
    if np.any(labels < 0):
        raise DataError(f"{path}: labels must be non-negative integers")
    ids = _parse_numeric(frame, id_column, integral=True).astype(np.int64) if id_column else np.arange(len(frame))
    return LabeledSet(features, labels, ids, os.path.splitext(os.path.basename(path))[0])


def export_csv(labeled_set, path, schema=None):
    """Write ``labeled_set`` with 17 significant digits (lossless for float64)."""
    schema = schema or CsvSchema()
    columns = schema.feature_columns or [f"x{i}" for i in range(labeled_set.feature_dim)]
    frame = pd.DataFrame(labeled_set.features.astype(np.float64), columns=columns)
    frame.insert(0, schema.sample_id_column, labeled_set.sample_ids)
    frame[schema.label_column] = labeled_set.labels
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    except OSError as err:
        raise ArtifactError(f"could not write {path}: {err}") from err
    return path
