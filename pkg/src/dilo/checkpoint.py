"""Checkpoint directories: ``meta.json`` + ``params.bin`` (+ ``latents.bin``).

Binary files hold little-endian float64 arrays back to back, row-major, in
the order of the index stored in ``meta.json``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import AdamState
from .latentopt import LatentTable

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    stage: int
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    latents: LatentTable | None = None
    parent: str | None = None
    extra: dict = field(default_factory=dict)


def _pack(arrays: dict[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), index


def _unpack(raw: bytes, index: list[dict], path: Path) -> dict[str, np.ndarray]:
    expected = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in index)
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    out = {}
    for e in index:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = a.astype(np.float64)
    return out


def optimizer_arrays(named_params, states: list[AdamState], prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for (name, _), st in zip(named_params, states):
        out[f"{prefix}.m/{name}"] = st.m
        out[f"{prefix}.v/{name}"] = st.v
        out[f"{prefix}.step/{name}"] = np.array(float(st.step))
    return out


def restore_states(named_params, arrays: dict[str, np.ndarray], prefix: str) -> list[AdamState]:
    states = []
    for name, p in named_params:
        key = f"{prefix}.m/{name}"
        if key not in arrays:
            states.append(AdamState.zeros_like(p.data))
            continue
        states.append(AdamState(arrays[key].copy(), arrays[f"{prefix}.v/{name}"].copy(),
                                int(np.asarray(arrays[f"{prefix}.step/{name}"]).item())))
    return states


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    raw, index = _pack({**ckpt.params, **ckpt.optimizer})
    (d / "params.bin").write_bytes(raw)
    meta = {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "config": ckpt.config,
        "param_names": list(ckpt.params),
        "index": index,
        "params_sha256": hashlib.sha256(raw).hexdigest(),
        "parent": ckpt.parent,
        "extra": ckpt.extra,
    }
    if ckpt.latents is not None:
        lat = ckpt.latents
        lraw, lindex = _pack(lat.arrays())
        (d / "latents.bin").write_bytes(lraw)
        meta["latents"] = {
            "index": lindex,
            "sha256": hashlib.sha256(lraw).hexdigest(),
            "d_s": lat.d_s, "d_z": lat.d_z,
            "instance_ids": lat.instance_ids,
            "instance_groups": [lat.group_ids[g] for g in lat.instance_group],
        }
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"{d}: no meta.json")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{d}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    raw = (d / "params.bin").read_bytes()
    arrays = _unpack(raw, meta["index"], d / "params.bin")
    if hashlib.sha256(raw).hexdigest() != meta["params_sha256"]:
        raise CheckpointError(f"{d / 'params.bin'}: checksum mismatch")
    names = set(meta["param_names"])
    params = {k: v for k, v in arrays.items() if k in names}
    optimizer = {k: v for k, v in arrays.items() if k not in names}
    latents = None
    if "latents" in meta:
        lm = meta["latents"]
        lraw = (d / "latents.bin").read_bytes()
        larr = _unpack(lraw, lm["index"], d / "latents.bin")
        if hashlib.sha256(lraw).hexdigest() != lm["sha256"]:
            raise CheckpointError(f"{d / 'latents.bin'}: checksum mismatch")
        latents = LatentTable(lm["instance_ids"], lm["instance_groups"], lm["d_s"], lm["d_z"])
        latents.load_arrays(larr)
    return Checkpoint(meta["stage"], meta["config"], params, optimizer, latents, meta.get("parent"),
                      meta.get("extra", {}))


def params_digest(directory) -> str:
    return hashlib.sha256((Path(directory) / "params.bin").read_bytes()).hexdigest()
