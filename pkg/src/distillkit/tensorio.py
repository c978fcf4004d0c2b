"""Manifest + blob tensor files.

Layout: one line of compact JSON (the manifest) terminated by ``\\n``, then a
blob of little-endian float32 row-major arrays. Offsets in the manifest are
relative to the first blob byte. Writing is canonical (sorted keys, fixed
separators, arrays in manifest order) so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import ModelConfig, TransformerWeights

FORMAT = "distillkit-tensors/1"
_DTYPE = np.dtype("<f4")


class TensorFileError(IOError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def provenance(config_obj, seed) -> dict:
    return {"config_hash": config_hash(config_obj), "seed": seed, "tool_version": __version__}


def save_tensors(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=_DTYPE)
        raw = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "meta": meta or {}, "tensors": index, "blob_bytes": offset}
    header = canonical_json(manifest).encode("ascii") + b"\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            header = fh.readline()
            blob = fh.read()
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc}") from exc
    try:
        manifest = json.loads(header.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: bad manifest line") from exc
    if manifest.get("format") != FORMAT:
        raise TensorFileError(f"{path}: unknown format {manifest.get('format')!r}")
    if len(blob) != manifest["blob_bytes"]:
        raise TensorFileError(f"{path}: blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    arrays = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + n], dtype=_DTYPE).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)
    return arrays, manifest["meta"]


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: TransformerWeights
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    ckpt.weights.check(ckpt.config)
    meta = {"kind": "checkpoint", "model_config": ckpt.config.to_dict(),
            "provenance": ckpt.provenance, "extra": ckpt.extra}
    save_tensors(path, ckpt.weights.arrays(), meta)


def load_checkpoint(path, dtype=np.float64) -> Checkpoint:
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise TensorFileError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(meta["model_config"])
    weights = TransformerWeights.from_arrays({k: v.astype(dtype) for k, v in arrays.items()})
    weights.check(config)
    return Checkpoint(config, weights, meta.get("provenance", {}), meta.get("extra", {}))
