"""Flat ``key = value`` run configuration files and the run fingerprint."""
from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional

from .training import TrainConfig

# build / data keys accepted alongside every TrainConfig field
BUILD_KEYS: dict[str, type] = {
    "variant": str,
    "scale": float,
    "blocks_per_stage": int,
    "dtype": str,
    "data": str,
    "rates": str,
    "multigrid": str,
    "up_kernel": int,
    "classes": int,
}


def _train_types() -> dict[str, Any]:
    out = {}
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        d = getattr(defaults, f.name)
        out[f.name] = type(d) if d is not None else (int if f.name == "crop" else float)
    return out


def _coerce(key: str, raw: str, typ) -> Any:
    if raw.lower() in ("none", "null", ""):
        return None
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ValueError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {**_train_types(), **BUILD_KEYS}
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ValueError(f"line {n}: duplicate key {key!r}")
        out[key] = _coerce(key, raw, types[key])
    return out


def load_config(path) -> dict[str, Any]:
    return parse_config(Path(path).read_text())


def dump_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in sorted(cfg.items()))


def split_config(cfg: dict[str, Any]) -> tuple[dict[str, Any], dict[str, Any]]:
    """(TrainConfig keys, build/data keys)."""
    names = {f.name for f in fields(TrainConfig)}
    return {k: v for k, v in cfg.items() if k in names}, {k: v for k, v in cfg.items() if k not in names}


def config_hash(cfg: dict[str, Any]) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def version_string(root: Optional[Path] = None) -> str:
    """Package version plus the source tree's commit, ``git describe`` style."""
    from . import __version__

    root = root or Path(__file__).resolve().parent
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=root, capture_output=True,
                             text=True, timeout=5)
        sha = rev.stdout.strip() if rev.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"v{__version__}-g{sha}" if sha else f"v{__version__}"
