"""Standalone BN conversion of a checkpoint to the domain of a CSV dataset."""

import logging
import os

from daftlab.bn_convert import (TargetStatistics, check_function_preservation, convert_bn,
                                estimate_target_statistics, preservation_tolerance)
from daftlab.checkpoint import load_checkpoint, save_checkpoint
from daftlab.data import batches, load_csv
from daftlab.errors import ConfigError
from daftlab.seeding import derive_seed
from scripts.manifest import read_json, write_json

logger = logging.getLogger(__name__)


def main(checkpoint_path, dataset_path, output_path, batch_size=64, seed=0, stats_path=None, report_path=None):
    """Estimate target statistics, convert and verify.

    With ``stats_path`` pointing at an existing file the cached statistics are
    used; otherwise they are estimated and written there. Nothing is written
    when verification fails.
    """
    net, metadata = load_checkpoint(checkpoint_path, with_metadata=True)
    if not net.bn_layers():
        raise ConfigError(f"{checkpoint_path}: network has no BN layers")
    data = load_csv(dataset_path, dtype=net.dtype)

    if stats_path and os.path.exists(stats_path):
        stats = TargetStatistics.from_dict(read_json(stats_path), dtype=net.dtype)
        logger.info("Using cached target statistics from %s", stats_path)
    else:
        stats = estimate_target_statistics(net, batches(data, batch_size, derive_seed(seed, "bn-stats", 0),
                                                        drop_last=True))
    converted = net.copy()
    record = convert_bn(converted, stats, probe_batches=[data.features])
    check_function_preservation(record.max_test_mode_discrepancy, net.dtype)

    save_checkpoint(converted, output_path, dict(metadata, converted_with=os.path.basename(dataset_path)))
    if stats_path and not os.path.exists(stats_path):
        write_json(stats_path, stats.to_dict())
    report_path = report_path or os.path.splitext(output_path)[0] + "_conversion.json"
    write_json(report_path, {
        "checkpoint": checkpoint_path,
        "dataset": dataset_path,
        "output": output_path,
        "tolerance": preservation_tolerance(net.dtype),
        "conversion": record.to_dict(),
    })
    logger.info("Conversion verified: max test-mode discrepancy %.3g", record.max_test_mode_discrepancy)
    return output_path, report_path
