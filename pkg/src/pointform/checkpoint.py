"""Versioned binary checkpoints.

Layout, all little-endian:

    bytes 0..3    magic "PFCK"
    bytes 4..7    format version (u32)
    bytes 8..15   manifest length in bytes (u64)
    manifest      UTF-8 JSON: config snapshot, training step, RNG seed state,
                  and a tensor table of (name, shape, offset) with ascending,
                  non-overlapping offsets into the payload
    payload       raw float32 values, row-major, in tensor-table order

Parameters live in float64 in memory and are cast to float32 on disk, so a
round trip reproduces them to 32-bit precision and save-load-save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .model import ModelConfig, PointTransformer

MAGIC = b"PFCK"
VERSION = 1


@dataclass
class CheckpointMeta:
    config: ModelConfig
    step: int
    seed_state: int


def save_checkpoint(path, model: PointTransformer, step: int = 0, seed_state: int = 0):
    entries = []
    payloads = []
    offset = 0
    for name, arr in model.registry.state_arrays():
        data = arr.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(data)
        offset += len(data)
    manifest = {
        "config": model.config.to_dict(),
        "step": int(step),
        "seed_state": int(seed_state),
        "tensors": entries,
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for data in payloads:
            fh.write(data)


def _read_manifest(raw):
    if len(raw) < 16:
        raise FormatError("checkpoint truncated before header")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (manifest_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + manifest_len > len(raw):
        raise FormatError("manifest length exceeds file size")
    try:
        manifest = json.loads(raw[16:16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    for key in ("config", "step", "seed_state", "tensors"):
        if key not in manifest:
            raise FormatError(f"manifest missing {key!r}")
    return manifest, raw[16 + manifest_len:]


def load_checkpoint(path, seed: int = 0):
    """Rebuild the model from disk; returns (model, CheckpointMeta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    manifest, payload = _read_manifest(raw)
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except TypeError as exc:
        raise FormatError(f"bad config snapshot: {exc}") from None
    model = PointTransformer(config, seed=seed)

    expected = {name: t.shape for name, t in model.registry.items()}
    prev_end = 0
    named = []
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected:
            raise FormatError(f"unknown tensor {name!r} in checkpoint")
        if shape != expected[name]:
            raise FormatError(f"tensor {name!r} shape {shape} != model {expected[name]}")
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        if offset < prev_end:
            raise FormatError(f"tensor {name!r} offset {offset} overlaps previous entry")
        if offset + nbytes > len(payload):
            raise FormatError(f"tensor {name!r} extends past end of payload")
        values = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        named.append((name, values.astype(np.float64).reshape(shape)))
        prev_end = offset + nbytes
    missing = set(expected) - {n for n, _ in named}
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)[:3]}...")
    model.registry.load_arrays(named)
    meta = CheckpointMeta(config=config, step=int(manifest["step"]),
                          seed_state=int(manifest["seed_state"]))
    return model, meta
