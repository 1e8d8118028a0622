"""Versioned binary checkpoints for the global LoRA state.

Layout: 4-byte magic, little-endian uint16 version, uint64 manifest
length, a JSON manifest (tensor names, shapes, dtype tag, byte offsets,
blob CRC32, client rescalers, round index), then one blob of row-major
little-endian float64 tensors. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import IntegrityError
from .federation import GlobalState
from .moe import LoraPair

MAGIC = b"SMCK"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")


def _state_tensors(state: GlobalState) -> list[tuple[str, np.ndarray]]:
    tensors = []
    for j, pair in enumerate(state.loras):
        tensors.append((f"expert{j}.a", pair.a))
        tensors.append((f"expert{j}.b", pair.b))
    return tensors


def save_checkpoint(state: GlobalState, path,
                    rescalers: dict[int, float] | None = None,
                    extra: dict | None = None) -> None:
    tensors = _state_tensors(state)
    entries = []
    blob = bytearray()
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f8",
            "offset": len(blob),
            "nbytes": len(raw),
        })
        blob.extend(raw)
    manifest = {
        "version": VERSION,
        "round_index": state.round_index,
        "num_experts": len(state.loras),
        "lora_rank": state.loras[0].rank if state.loras else 0,
        "lora_alpha": state.loras[0].alpha if state.loras else 0.0,
        "tensors": entries,
        "rescalers": {str(k): float(v) for k, v in (rescalers or {}).items()},
        "extra": extra or {},
        "blob_nbytes": len(blob),
        "blob_crc32": zlib.crc32(bytes(blob)),
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(payload)))
        f.write(payload)
        f.write(blob)


def load_checkpoint(path) -> tuple[GlobalState, dict[int, float], dict]:
    """Returns (state, client rescalers, extra metadata). Raises
    IntegrityError (with a byte offset) on any corruption."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise IntegrityError(f"truncated checkpoint: {len(data)} bytes at offset 0")
    magic, version, header_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r} at offset 0")
    if version > VERSION:
        raise IntegrityError(
            f"checkpoint version {version} is newer than supported {VERSION}"
        )
    manifest_end = _HEADER.size + header_len
    if len(data) < manifest_end:
        raise IntegrityError(
            f"truncated manifest: need {manifest_end} bytes, have {len(data)} "
            f"(offset {_HEADER.size})"
        )
    try:
        manifest = json.loads(data[_HEADER.size:manifest_end])
    except json.JSONDecodeError as exc:
        raise IntegrityError(
            f"corrupt manifest JSON at offset {_HEADER.size}: {exc}"
        ) from exc
    blob = data[manifest_end:]
    if len(blob) != manifest["blob_nbytes"]:
        raise IntegrityError(
            f"blob length {len(blob)} != recorded {manifest['blob_nbytes']} "
            f"(offset {manifest_end})"
        )
    if zlib.crc32(blob) != manifest["blob_crc32"]:
        raise IntegrityError(f"blob CRC mismatch at offset {manifest_end}")

    arrays = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + nbytes], dtype="<f8")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)

    loras = []
    for j in range(manifest["num_experts"]):
        loras.append(LoraPair(
            arrays[f"expert{j}.a"], arrays[f"expert{j}.b"],
            manifest["lora_rank"], manifest["lora_alpha"],
        ))
    state = GlobalState(loras=loras, round_index=manifest["round_index"])
    rescalers = {int(k): v for k, v in manifest["rescalers"].items()}
    return state, rescalers, manifest["extra"]
