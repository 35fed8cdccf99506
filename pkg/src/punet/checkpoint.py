"""Checkpoint container: ``manifest.json`` plus ``payload.bin``.

The payload holds float32 little-endian values of every tensor, concatenated
in manifest order. The manifest records the config, schema version and, per
tensor, name, shape and byte offset.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import ExperimentConfig, from_dict

CHECKPOINT_SCHEMA = 1
ARCH_FIELDS = (
    "levels",
    "channels_per_level",
    "window_size",
    "shift",
    "heads",
    "bias_channels",
    "tokens_per_class",
    "prompts_per_block",
    "patch_stride",
)


class CheckpointError(ValueError):
    pass


def write_tensors(
    path: str | os.PathLike,
    tensors: dict[str, torch.Tensor],
    config: ExperimentConfig,
    kind: str,
    meta: dict[str, Any] | None = None,
) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(out / "payload.bin", "wb") as fh:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": kind,
        "config": config.to_dict(),
        "meta": meta or {},
        "payload_bytes": offset,
        "tensors": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def read_manifest(path: str | os.PathLike) -> dict[str, Any]:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    return manifest


def read_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    manifest = read_manifest(path)
    raw = (Path(path) / "payload.bin").read_bytes()
    if len(raw) != manifest["payload_bytes"]:
        raise CheckpointError(f"payload has {len(raw)} bytes, manifest says {manifest['payload_bytes']}")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest


def check_compatible(saved: ExperimentConfig, expected: ExperimentConfig) -> None:
    diff = [f for f in ARCH_FIELDS if getattr(saved, f) != getattr(expected, f)]
    if diff:
        raise CheckpointError(f"checkpoint config conflicts on {', '.join(diff)}")


def manifest_config(manifest: dict[str, Any]) -> ExperimentConfig:
    return from_dict(manifest["config"])
