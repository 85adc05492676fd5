"""Unigram green-list watermark: keyed vocabulary split, logit bias, z-score detection."""

from __future__ import annotations

import hashlib
import hmac
import math
import secrets
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any

import torch

from sifbench.errors import DegenerateInputError, ParameterError, ShapeError
from sifbench.utils.io import read_json, write_json
from sifbench.utils.rng import stream_bytes
from sifbench.vlm.decoding import DecodeConfig, decode
from sifbench.vlm.model import ModelParams
from sifbench.vlm.tokenizer import strip_terminator

UNIGRAM_SCHEME = 1
SUPPORTED_SCHEMES = (UNIGRAM_SCHEME,)
SECRET_BYTES = 32
_UNIT = float(1 << 53)


@dataclass(frozen=True)
class WatermarkKey:
    secret: bytes
    scheme_id: int = UNIGRAM_SCHEME

    def __post_init__(self) -> None:
        if not isinstance(self.secret, (bytes, bytearray)) or len(self.secret) != SECRET_BYTES:
            raise ParameterError(f"Watermark secret must be {SECRET_BYTES} bytes.")
        if self.scheme_id not in SUPPORTED_SCHEMES:
            raise ParameterError(f"Unsupported watermark scheme_id {self.scheme_id!r}.")
        object.__setattr__(self, "secret", bytes(self.secret))

    def __repr__(self) -> str:
        return f"WatermarkKey(scheme_id={self.scheme_id}, digest={self.digest()[:12]}...)"

    def digest(self) -> str:
        """The only form of the key that may appear in reports."""
        return hashlib.sha256(self.secret).hexdigest()

    @classmethod
    def generate(cls, seed: int | None = None) -> "WatermarkKey":
        if seed is None:
            return cls(secrets.token_bytes(SECRET_BYTES))
        return cls(stream_bytes(seed, "watermark-key", SECRET_BYTES))

    def to_dict(self) -> dict[str, Any]:
        return {"scheme_id": self.scheme_id, "secret_hex": self.secret.hex()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WatermarkKey":
        try:
            secret = bytes.fromhex(str(data["secret_hex"]))
            scheme_id = int(data["scheme_id"])
        except (KeyError, ValueError) as exc:
            raise ParameterError(f"Malformed key document: {exc}") from exc
        return cls(secret, scheme_id)


def save_key(key: WatermarkKey, path: Path) -> Path:
    path = Path(path)
    write_json(path, key.to_dict())
    return path


def load_key(path: Path) -> WatermarkKey:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Key file not found: {path}")
    return WatermarkKey.from_dict(read_json(path))


@dataclass(frozen=True)
class WatermarkParams:
    gamma: float = 0.5
    delta: float = 4.0

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma!r}.")
        if not (self.delta >= 0.0) or math.isnan(self.delta):
            raise ParameterError(f"delta must be nonnegative, got {self.delta!r}.")

    def to_dict(self) -> dict[str, float]:
        return {"delta": float(self.delta), "gamma": float(self.gamma)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "WatermarkParams":
        data = dict(data or {})
        return cls(gamma=float(data.get("gamma", 0.5)), delta=float(data.get("delta", 4.0)))


@dataclass(frozen=True)
class GreenMask:
    membership: torch.Tensor

    @property
    def vocab_size(self) -> int:
        return int(self.membership.numel())

    def popcount(self) -> int:
        return int(self.membership.sum())

    def is_green(self, token: int) -> bool:
        return bool(self.membership[int(token)])


@dataclass(frozen=True)
class DetectionResult:
    token_count: int
    green_count: int
    z_score: float

    def to_dict(self) -> dict[str, Any]:
        return {"green_count": self.green_count, "token_count": self.token_count, "z_score": self.z_score}


def _unit_interval(secret: bytes, token: int) -> float:
    mac = hmac.new(secret, int(token).to_bytes(8, "big"), hashlib.sha256).digest()
    return (int.from_bytes(mac[:8], "big") >> 11) / _UNIT


@lru_cache(maxsize=64)
def _membership(secret: bytes, vocab_size: int, gamma: float) -> tuple[bool, ...]:
    return tuple(_unit_interval(secret, v) < gamma for v in range(vocab_size))


def green_list(key: WatermarkKey, vocab_size: int, gamma: float) -> GreenMask:
    if int(vocab_size) != vocab_size or vocab_size < 2:
        raise ParameterError("vocab_size must be an integer of at least 2.")
    if not (0.0 < gamma < 1.0):
        raise ParameterError(f"gamma must lie in (0, 1), got {gamma!r}.")
    bits = _membership(key.secret, int(vocab_size), float(gamma))
    return GreenMask(torch.tensor(bits, dtype=torch.bool))


def bias_logits(logits: torch.Tensor, mask: GreenMask, delta: float) -> torch.Tensor:
    if logits.shape[-1] != mask.vocab_size:
        raise ShapeError(f"Logits have {logits.shape[-1]} entries, mask covers {mask.vocab_size}.")
    if delta == 0:
        return logits.clone()
    return torch.where(mask.membership, logits + delta, logits)


def watermarked_decode(
    params: ModelParams,
    image: torch.Tensor,
    prompt: Sequence[int],
    key: WatermarkKey,
    wparams: WatermarkParams,
    max_len: int | None = None,
    decode_cfg: DecodeConfig | None = None,
) -> list[int]:
    """Teacher generation: plain decoding with every step's logits shifted toward the green list."""
    cfg = decode_cfg or DecodeConfig()
    if max_len is not None:
        if int(max_len) != max_len or max_len < 1:
            raise ParameterError("max_len must be a positive integer.")
        cfg = DecodeConfig.from_dict({**cfg.to_dict(), "max_len": int(max_len)})
    mask = green_list(key, params.config.vocab_size, wparams.gamma)
    return decode(params, image, prompt, cfg, logits_hook=lambda row: bias_logits(row, mask, wparams.delta))


def z_score(green_count: int, token_count: int, gamma: float) -> float:
    return (green_count - gamma * token_count) / math.sqrt(token_count * gamma * (1.0 - gamma))


def detect(
    tokens: Sequence[int],
    key: WatermarkKey,
    wparams: WatermarkParams,
    vocab_size: int,
) -> DetectionResult:
    body = strip_terminator([int(t) for t in tokens])
    if not body:
        raise DegenerateInputError("Detection needs at least one non-terminator token.")
    if min(body) < 0 or max(body) >= vocab_size:
        raise ParameterError(f"Token ids must lie in [0, {vocab_size}).")
    mask = _membership(key.secret, int(vocab_size), float(wparams.gamma))
    green = sum(1 for tok in body if mask[tok])
    return DetectionResult(len(body), green, z_score(green, len(body), wparams.gamma))
