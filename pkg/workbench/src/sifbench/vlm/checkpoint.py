"""Binary tensor container shared by model checkpoints and trigger images.

Layout: magic ``SIFTOY1\\0``, a little-endian uint64 header length, a UTF-8 JSON
header (format version, optional model config, tensor manifest), then the raw
little-endian float64 tensors in manifest order.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np
import torch

from sifbench.errors import (
    CheckpointConsistencyError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeError,
)
from sifbench.utils.hashing import sha256_hex
from sifbench.vlm.model import DTYPE, ModelConfig, ModelParams, param_shapes

MAGIC = b"SIFTOY1\0"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def pack_tensors(
    tensors: Mapping[str, torch.Tensor],
    *,
    kind: str,
    config: Mapping[str, Any] | None = None,
) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor.detach().cpu().to(DTYPE).numpy(), dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": dict(config) if config is not None else None,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(header_bytes)) + header_bytes + b"".join(blobs)


def unpack_tensors(blob: bytes) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("Bad magic bytes; not a SIFTOY1 tensor file.")
    cursor = len(MAGIC)
    if len(blob) < cursor + _LEN.size:
        raise CheckpointTruncatedError("File ends inside the header length field.")
    (header_len,) = _LEN.unpack_from(blob, cursor)
    cursor += _LEN.size
    if len(blob) < cursor + header_len:
        raise CheckpointTruncatedError("File ends inside the JSON header.")
    try:
        header = json.loads(blob[cursor : cursor + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"Header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict) or "format_version" not in header or "tensors" not in header:
        raise CheckpointFormatError("Header is missing format_version or tensors.")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Unsupported format_version {header['format_version']!r}; this build reads {FORMAT_VERSION}."
        )
    cursor += header_len
    data = blob[cursor:]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != count * 8:
            raise CheckpointConsistencyError(f"Tensor {entry['name']} byte size disagrees with its shape.")
        if start + nbytes > len(data):
            raise CheckpointTruncatedError(f"Tensor {entry['name']} runs past the end of the file.")
        array = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(array.astype(np.float64, copy=True))
    return header, tensors


def checkpoint_bytes(params: ModelParams) -> bytes:
    return pack_tensors(params.tensors, kind="model", config=params.config.to_dict())


def params_digest(params: ModelParams) -> str:
    """SHA-256 of the checkpoint encoding; used to identify suspect models in reports."""
    return sha256_hex(checkpoint_bytes(params))


def params_from_bytes(blob: bytes) -> ModelParams:
    header, tensors = unpack_tensors(blob)
    if header.get("kind") != "model" or not header.get("config"):
        raise CheckpointFormatError("Tensor file does not hold a model checkpoint.")
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointConsistencyError(f"Checkpoint is missing tensor {name}.")
        if tuple(tensors[name].shape) != shape:
            raise CheckpointConsistencyError(
                f"Header config implies {name} {shape}, file holds {tuple(tensors[name].shape)}."
            )
    if set(tensors) != set(expected):
        raise CheckpointConsistencyError(f"Unexpected tensors: {sorted(set(tensors) - set(expected))}.")
    try:
        return ModelParams(config, tensors)
    except ShapeError as exc:
        raise CheckpointConsistencyError(str(exc)) from exc


def save_checkpoint(params: ModelParams, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    return path


def load_checkpoint(path: Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return params_from_bytes(path.read_bytes())


def save_tensor(tensor: torch.Tensor, path: Path, *, name: str = "image") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pack_tensors({name: tensor}, kind="tensor"))
    return path


def load_tensor(path: Path, *, name: str = "image") -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tensor file not found: {path}")
    _, tensors = unpack_tensors(path.read_bytes())
    if name not in tensors:
        raise CheckpointConsistencyError(f"Tensor file {path} has no tensor named {name!r}.")
    return tensors[name]
