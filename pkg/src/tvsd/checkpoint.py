"""Checkpoints: a JSON manifest plus a raw little-endian float64 blob.

The blob is written first under a content-hashed name, then the manifest is
written to a temporary file and renamed into place.  The rename is the commit
point, so a reader either sees the previous checkpoint or the new one.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT = "tvsd-ckpt-1"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    seeds: dict[str, Any] = field(default_factory=dict)
    latent_stats: list[str] = field(default_factory=list)  # tensor names holding normalisation stats
    meta: dict[str, Any] = field(default_factory=dict)


def _manifest_path(path) -> Path:
    p = Path(path)
    return p if p.suffix == ".json" else p.with_suffix(".json")


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    mpath = _manifest_path(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    blob_name = f"{mpath.stem}.{digest[:16]}.bin"
    blob_path = mpath.parent / blob_name
    if not blob_path.exists():
        tmp = blob_path.with_name(blob_path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, blob_path)

    old_blob = None
    if mpath.exists():
        try:
            old_blob = json.loads(mpath.read_text())["blob"]
        except (ValueError, KeyError):
            old_blob = None
    manifest = {
        "format": FORMAT,
        "blob": blob_name,
        "sha256": digest,
        "tensors": entries,
        "latent_stats": ckpt.latent_stats,
        "config": ckpt.config,
        "seeds": ckpt.seeds,
        "meta": ckpt.meta,
    }
    tmp = mpath.with_name(mpath.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, mpath)
    if old_blob and old_blob != blob_name:
        (mpath.parent / old_blob).unlink(missing_ok=True)
    return mpath


def load_checkpoint(path) -> Checkpoint:
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{mpath}: unsupported checkpoint format {manifest.get('format')!r}")
    blob = (mpath.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{mpath}: blob checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * 8 != e["nbytes"] or e["offset"] + e["nbytes"] > len(blob):
            raise ValueError(f"{mpath}: tensor {e['name']} does not fit its blob segment")
        tensors[e["name"]] = np.frombuffer(blob, "<f8", n, e["offset"]).reshape(e["shape"]).astype(np.float64)
    return Checkpoint(tensors, manifest["config"], manifest["seeds"], manifest["latent_stats"], manifest["meta"])


def checkpoint_exists(path) -> bool:
    return _manifest_path(path).exists()
