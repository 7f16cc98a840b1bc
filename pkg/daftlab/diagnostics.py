"""
Feature-distortion diagnostics.

* ``feature_similarity``: per-sample cosine / L2 between pre- and
  post-fine-tuning features, histograms and per-class rankings.
* ``relative_change``: ``||W_after - W_before|| / ||W_before||`` per tensor,
  for parameters and BN running statistics.
* ``corruption_error``: error rate per corruption family and severity.
* ``method_comparison``: paired per-seed deltas and win counts.

All functions read networks without modifying them.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import permutations

import numpy as np
import pandas as pd

from daftlab.data import CORRUPTION_FAMILIES, all_corruptions, corrupt
from daftlab.errors import ConfigError, ShapeError
from daftlab.nn_core import FEATURE_EXTRACTOR, HEAD, accuracy, extract_features

logger = logging.getLogger(__name__)

DEFAULT_HISTOGRAM_BINS = 50
PRE_CONVERSION = "pre-conversion"
POST_CONVERSION = "post-conversion"


@dataclass
class SimilarityReport:
    sample_ids: np.ndarray
    labels: np.ndarray
    cosine: np.ndarray
    l2: np.ndarray
    zero_feature_count: int = 0
    bins: int = DEFAULT_HISTOGRAM_BINS
    rank_count: int = 5

    def cosine_histogram(self):
        counts, edges = np.histogram(self.cosine, bins=self.bins, range=(-1.0, 1.0))
        return counts, edges

    def l2_histogram(self):
        upper = float(self.l2.max()) if self.l2.size and self.l2.max() > 0 else 1.0
        counts, edges = np.histogram(self.l2, bins=self.bins, range=(0.0, upper))
        return counts, edges

    def summary(self):
        return {
            "samples": int(self.cosine.shape[0]),
            "cosine_mean": float(np.mean(self.cosine)),
            "cosine_median": float(np.median(self.cosine)),
            "l2_mean": float(np.mean(self.l2)),
            "l2_median": float(np.median(self.l2)),
            "zero_feature_count": int(self.zero_feature_count),
        }

    def ranking(self):
        """Sample ids with the highest and lowest cosine per class."""
        ranked = {}
        for label in np.unique(self.labels):
            index = np.flatnonzero(self.labels == label)
            order = index[np.argsort(-self.cosine[index], kind="stable")]
            ranked[int(label)] = {
                "highest": self.sample_ids[order[:self.rank_count]].tolist(),
                "lowest": self.sample_ids[order[::-1][:self.rank_count]].tolist(),
            }
        return ranked

    def to_frame(self):
        return pd.DataFrame({"sample_id": self.sample_ids, "label": self.labels,
                             "cosine": self.cosine, "l2": self.l2})

    def histogram_frame(self):
        cosine_counts, cosine_edges = self.cosine_histogram()
        l2_counts, l2_edges = self.l2_histogram()
        return pd.DataFrame({
            "bin": np.arange(self.bins),
            "cosine_low": cosine_edges[:-1], "cosine_high": cosine_edges[1:], "cosine_count": cosine_counts,
            "l2_low": l2_edges[:-1], "l2_high": l2_edges[1:], "l2_count": l2_counts,
        })

    def to_dict(self):
        cosine_counts, cosine_edges = self.cosine_histogram()
        l2_counts, l2_edges = self.l2_histogram()
        return {
            "summary": self.summary(),
            "bins": self.bins,
            "cosine_histogram": {"counts": cosine_counts.tolist(), "edges": cosine_edges.tolist()},
            "l2_histogram": {"counts": l2_counts.tolist(), "edges": l2_edges.tolist()},
            "ranking": {str(label): ranks for label, ranks in self.ranking().items()},
        }


def feature_similarity(pre, post, test_set, bins=DEFAULT_HISTOGRAM_BINS, rank_count=5):
    """Cosine similarity and L2 distance of test-mode features, per sample.

    A sample where either feature vector is zero gets cosine 0 and is
    counted in ``zero_feature_count``.
    """
    if bins < 1:
        raise ConfigError("histogram bins must be >= 1")
    if pre.feature_dim != post.feature_dim:
        raise ShapeError(f"feature dimensions differ: {pre.feature_dim} vs {post.feature_dim}")
    a = extract_features(pre, test_set.features).astype(np.float64)
    b = extract_features(post, test_set.features).astype(np.float64)
    norm_a = np.linalg.norm(a, axis=1)
    norm_b = np.linalg.norm(b, axis=1)
    defined = (norm_a > 0) & (norm_b > 0)
    cosine = np.zeros(a.shape[0])
    cosine[defined] = np.sum(a[defined] * b[defined], axis=1) / (norm_a[defined] * norm_b[defined])
    cosine = np.clip(cosine, -1.0, 1.0)
    zero_count = int(np.sum(~defined))
    if zero_count:
        logger.warning("%d samples have a zero feature vector; their cosine is reported as 0", zero_count)
    l2 = np.linalg.norm(a - b, axis=1)
    return SimilarityReport(np.asarray(test_set.sample_ids), np.asarray(test_set.labels), cosine, l2,
                            zero_count, bins, rank_count)


@dataclass
class TensorChange:
    tensor: str
    part: str
    position: int
    kind: str
    value: float
    defined: bool

    @property
    def log10(self):
        if not self.defined or self.value <= 0:
            return math.nan
        return math.log10(self.value)


@dataclass
class RelativeChangeReport:
    entries: list = field(default_factory=list)
    baseline: str = PRE_CONVERSION

    def values(self, kind=None, part=None):
        return [entry.value for entry in self.entries if entry.defined
                and (kind is None or entry.kind == kind) and (part is None or entry.part == part)]

    def mean(self, kind=None, part=None):
        values = self.values(kind, part)
        return float(np.mean(values)) if values else math.nan

    def __getitem__(self, tensor):
        for entry in self.entries:
            if entry.tensor == tensor:
                return entry
        raise KeyError(tensor)

    def to_frame(self):
        frame = pd.DataFrame([asdict(entry) for entry in self.entries],
                             columns=["tensor", "part", "position", "kind", "value", "defined"])
        frame["log10_value"] = [entry.log10 for entry in self.entries]
        frame["baseline"] = self.baseline
        return frame

    def to_dict(self):
        return {
            "baseline": self.baseline,
            "tensors": [{"tensor": e.tensor, "part": e.part, "position": e.position, "kind": e.kind,
                         "value": e.value if e.defined else "undefined"} for e in self.entries],
            "mean_parameter_change": self.mean("parameter"),
            "mean_statistic_change": self.mean("statistic"),
            "head_relative_change": self.mean(part=HEAD),
        }


def relative_change(before, after, baseline=PRE_CONVERSION):
    """Per-tensor ``||after - before||_2 / ||before||_2`` over flattened tensors.

    Tensors whose baseline norm is 0 are reported as undefined. ``baseline``
    labels whether ``before`` is the pre- or post-conversion checkpoint.
    """
    if before.architecture() != after.architecture():
        raise ConfigError("relative change needs identical architectures")
    after_parameters = after.parameters()
    after_statistics = after.statistics()
    entries = []
    for kind, tensors, targets in (("parameter", before.parameters(), after_parameters),
                                   ("statistic", before.statistics(), after_statistics)):
        for path, value in tensors.items():
            part, position = path.split(".")[:2]
            w = value.astype(np.float64).ravel()
            delta = float(np.linalg.norm(targets[path].astype(np.float64).ravel() - w))
            norm = float(np.linalg.norm(w))
            if norm == 0:
                entries.append(TensorChange(path, part, int(position), kind, math.nan, False))
            else:
                entries.append(TensorChange(path, part, int(position), kind, delta / norm, True))
    entries.sort(key=lambda e: (e.part != FEATURE_EXTRACTOR, e.position, e.kind, e.tensor))
    return RelativeChangeReport(entries, baseline)


@dataclass
class CorruptionTable:
    rows: list = field(default_factory=list)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=["family", "severity", "parameter", "error"])

    def family_means(self):
        frame = self.to_frame()
        corrupted = frame[frame["severity"] > 0]
        return {family: float(group["error"].mean()) for family, group in corrupted.groupby("family", sort=True)}

    @property
    def clean_error(self):
        for row in self.rows:
            if row["severity"] == 0:
                return row["error"]
        return math.nan

    @property
    def mean_corruption_error(self):
        errors = [row["error"] for row in self.rows if row["severity"] > 0]
        return float(np.mean(errors)) if errors else math.nan

    def to_dict(self):
        return {"clean_error": self.clean_error, "family_means": self.family_means(),
                "mean_corruption_error": self.mean_corruption_error, "rows": self.rows}


def corruption_error(net, task, specs=None, seed=0, test_set=None):
    """Test-mode error rate per (family, severity).

    Every family gets a severity-0 row equal to the clean error. ``seed``
    drives the random corruptions so all strategies see the same inputs.
    """
    test_set = test_set if test_set is not None else task.target_test_id
    test_set = test_set.astype(net.dtype)
    specs = list(specs) if specs is not None else all_corruptions()
    clean_error = 1.0 - accuracy(net, test_set.features, test_set.labels)
    families = [family for family in CORRUPTION_FAMILIES if any(spec.family == family for spec in specs)]
    rows = []
    for family in families:
        rows.append({"family": family, "severity": 0, "parameter": 0.0, "error": clean_error})
        for spec in sorted((s for s in specs if s.family == family and s.severity > 0), key=lambda s: s.severity):
            corrupted = corrupt(test_set, spec, seed)
            error = 1.0 - accuracy(net, corrupted.features, corrupted.labels)
            rows.append({"family": family, "severity": spec.severity, "parameter": spec.parameter, "error": error})
    return CorruptionTable(rows)


@dataclass
class RunMetrics:
    """Scalar summary of one (strategy, seed) cell."""

    strategy: str
    seed: int
    id_accuracy: float
    ood_accuracy: float
    median_cosine: float
    median_l2: float
    mean_relative_change: float
    statistic_relative_change: float
    head_relative_change: float
    mean_corruption_error: float = math.nan

    @classmethod
    def from_reports(cls, strategy, seed, similarity, change, id_accuracy, ood_accuracy, corruption=None):
        summary = similarity.summary()
        return cls(strategy, int(seed), float(id_accuracy), float(ood_accuracy),
                   summary["cosine_median"], summary["l2_median"],
                   change.mean(part=FEATURE_EXTRACTOR), change.mean("statistic"), change.mean(part=HEAD),
                   corruption.mean_corruption_error if corruption is not None else math.nan)

    @classmethod
    def from_dict(cls, data):
        values = {name: float(data[name]) for name in cls.__dataclass_fields__ if name not in ("strategy", "seed")}
        return cls(strategy=str(data["strategy"]), seed=int(data["seed"]), **values)

    def to_dict(self):
        return asdict(self)


# metric -> True when larger is better
COMPARED_METRICS = {
    "median_cosine": True,
    "median_l2": False,
    "mean_relative_change": False,
    "statistic_relative_change": False,
    "id_accuracy": True,
    "ood_accuracy": True,
}


@dataclass
class PairComparison:
    strategy: str
    reference: str
    seeds: list
    deltas: dict
    wins: dict

    def win_rate(self, metric):
        return self.wins[metric] / len(self.seeds)

    def rows(self):
        return [{"strategy": self.strategy, "reference": self.reference, "metric": metric,
                 "seeds": len(self.seeds), "mean_delta": float(np.mean(self.deltas[metric])),
                 "wins": self.wins[metric], "win_rate": self.win_rate(metric)}
                for metric in COMPARED_METRICS]

    def delta_rows(self):
        return [{"strategy": self.strategy, "reference": self.reference, "seed": seed, "metric": metric,
                 "delta": float(self.deltas[metric][i])}
                for metric in COMPARED_METRICS for i, seed in enumerate(self.seeds)]


def compare_strategies(runs, reference_runs):
    """Paired deltas ``runs - reference_runs`` per seed; ties count as half a win."""
    by_seed = {run.seed: run for run in runs}
    reference_by_seed = {run.seed: run for run in reference_runs}
    if not by_seed or set(by_seed) != set(reference_by_seed):
        raise ConfigError(f"strategies were run on different seeds: {sorted(by_seed)} vs {sorted(reference_by_seed)}")
    seeds = sorted(by_seed)
    deltas, wins = {}, {}
    for metric, larger_is_better in COMPARED_METRICS.items():
        values = np.array([getattr(by_seed[s], metric) - getattr(reference_by_seed[s], metric) for s in seeds])
        signed = values if larger_is_better else -values
        deltas[metric] = values
        wins[metric] = float(np.sum(signed > 0) + 0.5 * np.sum(signed == 0))
    strategy = runs[0].strategy
    reference = reference_runs[0].strategy
    return PairComparison(strategy, reference, seeds, deltas, wins)


@dataclass
class ComparisonSummary:
    pairs: list = field(default_factory=list)

    def pair(self, strategy, reference):
        for pair in self.pairs:
            if pair.strategy == strategy and pair.reference == reference:
                return pair
        raise KeyError((strategy, reference))

    def to_frame(self):
        return pd.DataFrame([row for pair in self.pairs for row in pair.rows()])

    def deltas_frame(self):
        return pd.DataFrame([row for pair in self.pairs for row in pair.delta_rows()])

    def to_dict(self):
        return {f"{p.strategy}_vs_{p.reference}": {"seeds": p.seeds, "wins": p.wins,
                                                   "mean_delta": {m: float(np.mean(d)) for m, d in p.deltas.items()}}
                for p in self.pairs}


def method_comparison(runs):
    """Compare every ordered pair of strategies found in ``runs``."""
    grouped = {}
    for run in runs:
        grouped.setdefault(run.strategy, []).append(run)
    if len(grouped) < 2:
        raise ConfigError("method comparison needs at least two strategies")
    seed_sets = {strategy: sorted(run.seed for run in group) for strategy, group in grouped.items()}
    if len({tuple(seeds) for seeds in seed_sets.values()}) != 1:
        raise ConfigError(f"strategies were run on different seeds: {seed_sets}")
    return ComparisonSummary([compare_strategies(grouped[a], grouped[b]) for a, b in permutations(grouped, 2)])
