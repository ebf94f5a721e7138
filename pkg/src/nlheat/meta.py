"""Output provenance helpers: build id and JSON headers."""

from __future__ import annotations

import json
import subprocess
from importlib import metadata

SCHEMA_VERSION = 1


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return f"nlheat-{metadata.version('nlheat')}"
    except metadata.PackageNotFoundError:
        return "nlheat-unknown"


def json_header(**fields) -> dict:
    head = {"schema_version": SCHEMA_VERSION, "build_id": build_id()}
    head.update(fields)
    return head


def write_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_coerce)
        fh.write("\n")


def _coerce(obj):
    try:
        import numpy as np

        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, (np.floating,)):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
    except ImportError:
        pass
    raise TypeError(f"not JSON serializable: {type(obj)}")
