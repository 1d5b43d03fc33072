"""Checkpoint directories: ``manifest.json`` plus one ``tensors.bin`` blob.

The blob is a concatenation of tensors in the engine's binary layout (u64 rank,
u64 dims, little-endian f64 data). The manifest echoes the model config and
lists every tensor with its shape, byte offset and length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, WideNetConfig, init_params, named_parameters
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = "widenet-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    """Unreadable checkpoint or one inconsistent with its config."""


@dataclass
class Checkpoint:
    config: WideNetConfig
    params: ModelParams
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    cfg: WideNetConfig,
    params: ModelParams,
    extra: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    items = [("model/" + k, v.data) for k, v in named_parameters(params).items()]
    items += [("extra/" + k, np.asarray(v)) for k, v in (extra or {}).items()]
    for name, arr in items:
        payload = tensor_to_bytes(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(payload)})
        chunks.append(payload)
        offset += len(payload)
    manifest = {
        "magic": MAGIC,
        "version": VERSION,
        "config": cfg.to_dict(),
        "tensors": entries,
        "meta": meta or {},
    }
    tmp_blob = path / (BLOB + ".tmp")
    tmp_blob.write_bytes(b"".join(chunks))
    tmp_blob.replace(path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc.msg})") from None
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(path: str | Path, expect: WideNetConfig | None = None) -> Checkpoint:
    """Rebuild parameters from a checkpoint, validating every shape against the config."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        cfg = WideNetConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config in manifest: {exc}") from None
    if expect is not None and expect.to_dict() != cfg.to_dict():
        raise CheckpointError(f"{path}: checkpoint config differs from the requested config")
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {BLOB}") from None

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of blob")
        try:
            arr = tensor_from_bytes(blob[start : start + nbytes])
        except ValueError as exc:
            raise CheckpointError(f"{path}: tensor {entry['name']}: {exc}") from None
        if list(arr.shape) != list(entry["shape"]):
            raise CheckpointError(f"{path}: tensor {entry['name']} header disagrees with manifest shape")
        arrays[entry["name"]] = arr

    params = init_params(cfg, 0)
    named = named_parameters(params)
    model_names = {k[len("model/"):] for k in arrays if k.startswith("model/")}
    missing = sorted(set(named) - model_names)
    unexpected = sorted(model_names - set(named))
    if missing or unexpected:
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing}, unexpected {unexpected})")
    for name, t in named.items():
        arr = arrays["model/" + name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, config requires {t.shape}")
        t.data[...] = arr
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(cfg, params, extra, manifest.get("meta", {}))
