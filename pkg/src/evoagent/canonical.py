"""Canonical JSON serialization and state hashing.

Snapshots of bandit posteriors, memory stores, and run results are hashed
for the frozen-test integrity checks, so the byte encoding must be stable:
sorted keys, no whitespace, and floats rendered with Python's shortest
round-trip repr (identical for the same IEEE-754 double on every platform).
NaN and infinity are rejected rather than silently encoded.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def _pyify(obj: Any) -> Any:
    """Convert numpy scalars/arrays and sets into plain JSON-friendly types."""
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_pyify(x) for x in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pyify(x) for x in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(str(x) for x in obj)
    return obj


def canonical_json(obj: Any) -> str:
    """Render ``obj`` as canonical JSON text (sorted keys, fixed formatting)."""
    return json.dumps(_pyify(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def state_hash(obj: Any) -> str:
    """SHA-256 hex digest of the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
