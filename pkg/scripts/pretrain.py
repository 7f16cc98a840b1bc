"""Stage 1: generate the task for a seed, export its splits and pretrain on source."""

import logging
import os

from daftlab.checkpoint import save_checkpoint
from daftlab.data import estimate_kl_divergence, export_csv, generate_task
from daftlab.errors import ArtifactError
from daftlab.nn_core import resolve_dtype
from daftlab.pretrain import pretrain_source
from daftlab.seeding import derive_seed
from scripts.manifest import RunManifest, pretrain_key, seed_dir, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "pretrained.joblib"


def task_for_seed(config, seed):
    """The task of root seed ``seed``; regenerated identically on every call."""
    return generate_task(config.task, derive_seed(seed, "task"))


def pretrain_seed(config, seed):
    """Pretrain one seed; returns ``{artifact name: path}``."""
    out_dir = seed_dir(config.output_dir, seed)
    task = task_for_seed(config, seed)
    paths = {}
    for name, split in task.splits().items():
        paths[f"task_{name}"] = os.path.join(out_dir, "task", f"{name}.csv")
        export_csv(split, paths[f"task_{name}"])

    net, log = pretrain_source(config.architecture, task, config.pretrain, derive_seed(seed, "pretrain"),
                               resolve_dtype(config.precision))
    net.seed_lineage = [int(seed)]
    best = log.epochs[log.best_epoch]
    metadata = {"seed": int(seed), "config_hash": config.config_hash(), "best_epoch": log.best_epoch,
                "source_val_accuracy": best["source_val_accuracy"]}
    paths["checkpoint"] = save_checkpoint(net, os.path.join(out_dir, CHECKPOINT_NAME), metadata)
    paths["pretrain_log"] = os.path.join(out_dir, "pretrain_log.csv")
    try:
        log.to_frame().to_csv(paths["pretrain_log"], index=False)
    except OSError as err:
        raise ArtifactError(f"could not write {paths['pretrain_log']}: {err}") from err

    domains = ["target"] + [f"ood_{level}" for level in sorted(task.target_test_ood)]
    shift = {domain: estimate_kl_divergence(task, domain, seed=derive_seed(seed, "kl")) for domain in domains}
    paths["task_summary"] = write_json(os.path.join(out_dir, "task_summary.json"), {
        "seed": int(seed), "task_seed": task.seed, "spec": config.task.to_dict(),
        "kl_divergence_from_source": shift, "strong_ood": task.strong_ood_name,
        "source_val_accuracy": best["source_val_accuracy"],
    })
    logger.info("Seed %d pretrained: source val accuracy %.4f (epoch %d)", seed,
                best["source_val_accuracy"], log.best_epoch)
    return paths


def main(config, seeds=None, manifest=None):
    """``pretrain`` subcommand: returns ``{seed: checkpoint path}``."""
    seeds = list(seeds) if seeds is not None else config.seeds
    own_manifest = manifest is None
    if own_manifest:
        manifest = RunManifest.open(config.output_dir, config.config_hash())
    checkpoints = {}
    for seed in seeds:
        key = pretrain_key(seed)
        fingerprint = config.pretrain_fingerprint(seed)
        if not manifest.is_complete(key, fingerprint):
            manifest.record(key, pretrain_seed(config, seed), fingerprint)
            manifest.save(config.output_dir)
        else:
            logger.info("Seed %d already pretrained, skipping", seed)
        checkpoints[seed] = manifest.paths(key)["checkpoint"]
    return checkpoints
