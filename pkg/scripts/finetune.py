"""Stage 2: train one (cell, seed): optional learning-rate sweep, then the strategy."""

import logging
import os

from daftlab.checkpoint import load_checkpoint, save_checkpoint
from daftlab.errors import ArtifactError
from daftlab.finetune import LP, FineTuneConfig, run_strategy, sweep_learning_rates
from daftlab.seeding import derive_seed
from scripts.manifest import cell_dir, write_json
from scripts.pretrain import task_for_seed

logger = logging.getLogger(__name__)


def write_frame(frame, path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as err:
        raise ArtifactError(f"could not write {path}: {err}") from err
    return path


def cell_config(config, cell, seed):
    name, strategy, overrides = config.cell(cell)
    return FineTuneConfig.for_strategy(strategy, **dict(overrides, seed=derive_seed(seed, "finetune")))


def run_sweep(config, cell, seed, pretrained, task, out_dir):
    """Two-step sweep for one cell; writes ``sweep.csv`` / ``sweep.json``."""
    base = cell_config(config, cell, seed)
    result = sweep_learning_rates(pretrained, base.strategy, task, config.sweep.grids(base.strategy), base)
    paths = {"sweep_csv": write_frame(result.to_frame(), os.path.join(out_dir, "sweep.csv")),
             "sweep_json": write_json(os.path.join(out_dir, "sweep.json"), result.to_dict())}
    return result, paths


def train_cell(config, cell, seed, pretrained_path):
    """Train ``cell`` for root seed ``seed``; returns ``(StrategyResult, paths)``."""
    out_dir = cell_dir(config.output_dir, seed, cell)
    pretrained = load_checkpoint(pretrained_path)
    task = task_for_seed(config, seed)
    ft_config = cell_config(config, cell, seed)
    paths = {}
    if config.sweep.enabled and ft_config.strategy != LP:
        sweep, paths = run_sweep(config, cell, seed, pretrained, task, out_dir)
        ft_config = _with_rates(ft_config, sweep.chosen_eta_theta, sweep.chosen_eta_w)

    result = run_strategy(pretrained, ft_config.strategy, task, ft_config)
    result.network.seed_lineage = list(pretrained.seed_lineage) + [ft_config.seed]
    metadata = {"cell": cell, "strategy": ft_config.strategy, "seed": int(seed), "config_hash": config.config_hash()}
    paths["checkpoint"] = save_checkpoint(result.network, os.path.join(out_dir, "finetuned.joblib"), metadata)
    paths["baseline"] = save_checkpoint(result.baseline, os.path.join(out_dir, "baseline.joblib"),
                                        dict(metadata, role="fine-tuning start"))
    paths["train_log"] = write_frame(result.log.to_frame(), os.path.join(out_dir, "train_log.csv"))
    paths["finetune_config"] = write_json(os.path.join(out_dir, "finetune_config.json"), ft_config.to_dict())
    if result.conversion is not None:
        paths["conversion"] = write_json(os.path.join(out_dir, "conversion.json"), result.conversion.to_dict())
        paths["conversion_csv"] = write_frame(result.conversion.to_frame(), os.path.join(out_dir, "conversion.csv"))
        paths["target_statistics"] = write_json(os.path.join(out_dir, "target_statistics.json"),
                                                result.statistics.to_dict())
    if result.linear_probe is not None:
        paths["linear_probe_log"] = write_frame(result.linear_probe.log.to_frame(),
                                                 os.path.join(out_dir, "linear_probe_log.csv"))
    return result, paths


def _with_rates(ft_config, eta_theta, eta_w):
    values = ft_config.to_dict()
    strategy = values.pop("strategy")
    values.update(eta_theta=eta_theta, eta_w=eta_w)
    return FineTuneConfig.for_strategy(strategy, **values)


def sweep_main(config, cell, seed, pretrained_path):
    """``sweep`` subcommand."""
    pretrained = load_checkpoint(pretrained_path)
    result, paths = run_sweep(config, cell, seed, pretrained, task_for_seed(config, seed),
                              cell_dir(config.output_dir, seed, cell))
    logger.info("%s seed %d: eta_theta=%g, eta_w=%g", cell, seed, result.chosen_eta_theta, result.chosen_eta_w)
    return paths
