from __future__ import annotations

import hashlib

import torch

_MASK63 = (1 << 63) - 1


def derive_seed(seed: int, label: str, index: int = 0) -> int:
    """Stable 63-bit seed for the substream ``(seed, label, index)``."""
    material = f"{int(seed)}:{label}:{int(index)}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "little") & _MASK63


def generator(seed: int, label: str, index: int = 0) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(seed, label, index))
    return gen


def stream_bytes(seed: int, label: str, length: int, index: int = 0) -> bytes:
    """Deterministic byte string drawn from a labelled substream."""
    out = bytearray()
    counter = 0
    while len(out) < length:
        block = f"{int(seed)}:{label}:{int(index)}:{counter}".encode("utf-8")
        out.extend(hashlib.sha256(block).digest())
        counter += 1
    return bytes(out[:length])
