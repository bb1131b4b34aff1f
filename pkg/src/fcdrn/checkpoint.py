"""Checkpoint directories: ``manifest.json`` plus one little-endian raw blob per tensor."""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .builder import FCDRN, from_architecture

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def model_tensors(model: FCDRN) -> dict[str, np.ndarray]:
    """Every parameter and BN running statistic, keyed by graph path."""
    out = {name: p.data for name, p in model.named_parameters()}
    for name, b in model.named_buffers():
        out[name] = b
    return out


def _blob_name(key: str) -> str:
    return key + ".bin"


def save_checkpoint(model: FCDRN, path, meta: Optional[dict[str, Any]] = None,
                    optimizer_state: Optional[dict[str, np.ndarray]] = None) -> Path:
    """Write ``path/manifest.json`` and ``path/tensors/*.bin``.

    Blobs are little-endian in the model's float type (float32 unless the model
    was built in float64).  The directory is assembled next to the target and
    moved into place, so a reader never sees a half-written checkpoint.
    """
    path = Path(path)
    meta = dict(meta or {})
    rng_state = meta.pop("rng_state", None)
    if isinstance(rng_state, np.random.Generator):
        rng_state = rng_state.bit_generator.state
    dt = np.dtype(model.dtype).newbyteorder("<")
    tensors = model_tensors(model)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "variant": model.family,
        "scale": model.plan.scale,
        "epoch": meta.pop("epoch", None),
        "val_miou": meta.pop("val_miou", None),
        "rng_state": rng_state,
        "meta": meta,
        "tensors": {k: {"shape": list(v.shape), "dtype": dt.str, "file": _blob_name(k)} for k, v in tensors.items()},
        "optimizer": None,
    }
    opt = dict(optimizer_state or {})
    if opt:
        manifest["optimizer"] = {k: {"shape": list(v.shape), "dtype": dt.str, "file": _blob_name(k)}
                                 for k, v in opt.items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        (tmp / "tensors").mkdir()
        for k, v in tensors.items():
            (tmp / "tensors" / _blob_name(k)).write_bytes(np.ascontiguousarray(v, dtype=dt).tobytes())
        if opt:
            (tmp / "optimizer").mkdir()
            for k, v in opt.items():
                (tmp / "optimizer" / _blob_name(k)).write_bytes(np.ascontiguousarray(v, dtype=dt).tobytes())
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    mf = Path(path) / "manifest.json"
    if not mf.is_file():
        raise CheckpointError(f"no manifest.json in {path}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {manifest.get('format_version')!r} is not supported "
                              f"(expected {FORMAT_VERSION})")
    return manifest


def load_checkpoint(path) -> tuple[FCDRN, dict]:
    """Rebuild the graph from the manifest and fill every tensor; returns (model, manifest)."""
    path = Path(path)
    manifest = read_manifest(path)
    model = from_architecture(manifest["architecture"])
    entries = manifest["tensors"]
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if set(entries) != expected:
        extra = sorted(set(entries) - expected)
        missing = sorted(expected - set(entries))
        raise CheckpointError(f"tensor set does not match architecture (missing {missing[:3]}, extra {extra[:3]})")
    for key, ent in entries.items():
        blob = path / "tensors" / ent["file"]
        if not blob.is_file():
            raise CheckpointError(f"missing blob for tensor {key}")
        shape = tuple(ent["shape"])
        target = params[key].data if key in params else buffers[key]
        if shape != target.shape:
            raise CheckpointError(f"tensor {key}: stored shape {shape} != architecture shape {target.shape}")
        arr = _read_blob(blob, key, ent).astype(model.dtype)
        if key in params:
            params[key].data = arr
        else:
            target[...] = arr
    return model, manifest


def _read_blob(blob: Path, key: str, ent: dict) -> np.ndarray:
    dt = np.dtype(ent["dtype"])
    shape = tuple(ent["shape"])
    raw = blob.read_bytes()
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) != need:
        raise CheckpointError(f"tensor {key}: blob has {len(raw)} bytes, expected {need}")
    return np.frombuffer(raw, dtype=dt).reshape(shape)


def load_optimizer_state(path) -> Optional[dict[str, np.ndarray]]:
    """Running squared-gradient averages saved with the checkpoint, if any."""
    path = Path(path)
    entries = read_manifest(path).get("optimizer")
    if not entries:
        return None
    out = {}
    for key, ent in entries.items():
        blob = path / "optimizer" / ent["file"]
        if not blob.is_file():
            raise CheckpointError(f"missing optimizer blob for {key}")
        out[key] = _read_blob(blob, key, ent).copy()
    return out


def restore_rng(manifest: dict) -> Optional[np.random.Generator]:
    state = manifest.get("rng_state")
    if not state:
        return None
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen
