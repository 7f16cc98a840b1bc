"""Rebuild cross-strategy reports from the cells recorded in the manifest."""

import logging
import os

from daftlab.errors import ArtifactError
from scripts.evaluate import write_comparison
from scripts.manifest import MANIFEST_NAME, RunManifest

logger = logging.getLogger(__name__)


def main(config):
    """``report`` subcommand; returns ``{report name: path}``."""
    if not os.path.exists(os.path.join(config.output_dir, MANIFEST_NAME)):
        raise ArtifactError(f"no manifest in {config.output_dir}; run the pipeline first")
    manifest = RunManifest.open(config.output_dir, config.config_hash())
    paths = write_comparison(config, manifest)
    if not paths:
        logger.warning("No completed cells in %s", config.output_dir)
    for name, path in sorted(paths.items()):
        logger.info("%s: %s", name, path)
    return paths
