"""Parameter containers and the on-disk checkpoint format.

Parameters are plain ``dict[str, np.ndarray]`` mappings with a fixed key
order. Ensembles stack member parameters along a leading axis.

Checkpoint format (version 1): ``<name>.bin`` holds every array as
little-endian float64, C order, concatenated in key order; ``<name>.json``
is the manifest ``{"format": "msglab-params", "version": 1, "entries":
[{"name", "shape", "offset"}...], "meta": {...}}`` where ``offset`` counts
float64 elements.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np

Params = dict[str, np.ndarray]

FORMAT_NAME = "msglab-params"
FORMAT_VERSION = 1


def tree_map(fn: Callable, *trees: Params) -> Params:
    return {k: fn(*(t[k] for t in trees)) for k in trees[0]}


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def count(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()]) if params else np.zeros(0)


def unflatten(flat: np.ndarray, like: Params) -> Params:
    out, offset = {}, 0
    for k, v in like.items():
        out[k] = np.asarray(flat[offset : offset + v.size], dtype=np.float64).reshape(v.shape).copy()
        offset += v.size
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, expected {offset}")
    return out


def member(params: Params, i: int) -> Params:
    """Slice member ``i`` out of stacked parameters."""
    return {k: v[i].copy() for k, v in params.items()}


def stack(members: list[Params]) -> Params:
    return {k: np.stack([m[k] for m in members]) for k in members[0]}


def save_params(path: str | Path, params: Params, meta: dict | None = None) -> list[Path]:
    """Write ``path.bin`` and ``path.json``; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    for k, v in params.items():
        entries.append({"name": k, "shape": list(v.shape), "offset": offset})
        offset += v.size
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    flatten(params).astype("<f8").tofile(bin_path)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "entries": entries, "meta": meta or {}}
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [bin_path, json_path]


def load_params(path: str | Path) -> tuple[Params, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {manifest.get('format')} v{manifest.get('version')}")
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8").astype(np.float64)
    params = {}
    for e in manifest["entries"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        params[e["name"]] = flat[e["offset"] : e["offset"] + size].reshape(e["shape"]).copy()
    return params, manifest["meta"]
