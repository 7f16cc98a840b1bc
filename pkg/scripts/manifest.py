"""
Run manifest: which cells finished, where their artifacts are, and when.

Only the orchestrating process writes the manifest; workers return their
results to it. Writes go to a temporary file that replaces the old one.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from daftlab import __version__
from daftlab.errors import ArtifactError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
OK = "ok"
FAILED = "failed"


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def to_jsonable(value):
    """Plain JSON types; non-finite floats become ``"nan"`` / ``"inf"`` / ``"-inf"``."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    return value


def write_json(path, payload):
    """Atomic JSON write with sorted keys."""
    tmp = f"{path}.tmp"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as handle:
            json.dump(to_jsonable(payload), handle, indent=2, sort_keys=True, allow_nan=False)
            handle.write("\n")
        os.replace(tmp, path)
    except OSError as err:
        raise ArtifactError(f"could not write {path}: {err}") from err
    return path


def read_json(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as err:
        raise ArtifactError(f"could not read {path}: {err}") from err


@dataclass
class RunManifest:
    config_hash: str
    code_version: str = __version__
    created: str = field(default_factory=_now)
    updated: str = ""
    entries: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @classmethod
    def open(cls, output_dir, config_hash):
        """Load the manifest in ``output_dir``.

        Entries survive a config change; each one is reused only while its
        fingerprint matches (see ``is_complete``).
        """
        path = os.path.join(output_dir, MANIFEST_NAME)
        if not os.path.exists(path):
            return cls(config_hash)
        data = read_json(path)
        if data.get("config_hash") != config_hash:
            logger.info("Config changed since the last run in %s; reusing cells whose inputs match", output_dir)
            data["config_hash"] = config_hash
        return cls(**data)

    def is_complete(self, key, fingerprint=None):
        entry = self.entries.get(key)
        if not entry or entry["status"] != OK:
            return False
        if fingerprint is not None and entry.get("fingerprint") != fingerprint:
            return False
        return all(os.path.exists(p) for p in entry["paths"].values())

    def record(self, key, paths, fingerprint=None, **info):
        missing = [p for p in paths.values() if not os.path.exists(p)]
        if missing:
            raise ArtifactError(f"{key}: artifacts missing after completion: {missing}")
        self.entries[key] = {"status": OK, "paths": dict(paths), "completed": _now(), "fingerprint": fingerprint,
                             **info}

    def record_failure(self, key, error, exit_code):
        self.entries[key] = {"status": FAILED, "paths": {}, "completed": _now(),
                             "error": str(error), "exit_code": int(exit_code)}

    def paths(self, key):
        return self.entries[key]["paths"]

    def failed(self, keys=None):
        """Failed entries, limited to ``keys`` when given."""
        return {key: entry for key, entry in self.entries.items()
                if entry["status"] == FAILED and (keys is None or key in keys)}

    def save(self, output_dir):
        self.updated = _now()
        return write_json(os.path.join(output_dir, MANIFEST_NAME), asdict(self))


def seed_dir(output_dir, seed):
    return os.path.join(output_dir, f"seed_{seed}")


def cell_dir(output_dir, seed, cell):
    return os.path.join(seed_dir(output_dir, seed), "cells", cell)


def pretrain_key(seed):
    return f"seed_{seed}/pretrain"


def cell_key(seed, cell):
    return f"seed_{seed}/{cell}"
