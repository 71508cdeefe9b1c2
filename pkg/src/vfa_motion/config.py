"""Config parsing and reproducibility helpers (canonical JSON, digests)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError

__all__ = [
    "reject_unknown_keys",
    "require_keys",
    "canonical_json",
    "write_json",
    "read_json",
    "sha256_bytes",
    "sha256_file",
    "config_hash",
]


def reject_unknown_keys(mapping: Mapping, allowed: Iterable[str], context: str) -> None:
    """Unknown keys are config errors: silent default drift is worse."""
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")


def require_keys(mapping: Mapping, required: Iterable[str], context: str) -> None:
    missing = [k for k in required if k not in mapping]
    if missing:
        raise ConfigError(f"{context}: missing keys {missing}")


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj))
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def config_hash(obj) -> str:
    return sha256_bytes(canonical_json(obj).encode())
