"""Canonical JSON serialization and stable hashing.

Every hash in the artifact (run records, side-effect ledgers, config
fingerprints) is a sha256 over this canonical form, so byte-stability across
runs, workers, and machines reduces to: no wall-clock values and no absolute
paths inside hashed structures.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_hash(value: Any) -> str:
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_run_seed(base_seed: int, scenario_id: str, phase: str, run_index: int) -> int:
    """Per-run seed: stable hash of (base_seed, scenario_id, phase, run_index)."""
    key = f"{base_seed}|{scenario_id}|{phase}|{run_index}"
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
