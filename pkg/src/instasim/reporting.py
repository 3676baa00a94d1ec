"""Canonical JSON serialization and config hashing for reports.

Reports must be byte-identical across reruns with the same inputs, so
everything funnels through one canonical encoder: sorted keys, compact
separators, no NaN/Infinity, a single trailing newline on disk.
"""
from __future__ import annotations

import hashlib
import json

from .errors import InvalidInput, IoError

FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    """Serialize ``obj`` to the canonical JSON text."""
    try:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise InvalidInput(f"report is not serializable: {exc}") from exc


def config_hash(params: dict) -> str:
    """Hash the semantic parameters of a run.

    Execution knobs (thread counts, file paths) must not be passed in:
    the hash identifies what was computed, not where or how fast.
    """
    return hashlib.sha256(canonical_json(params).encode("utf-8")).hexdigest()


def write_json_report(path, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(obj))
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc
