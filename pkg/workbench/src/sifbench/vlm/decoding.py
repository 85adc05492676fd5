from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from typing import Any

import torch

from sifbench.errors import CapacityError, DegenerateInputError, ParameterError
from sifbench.utils.rng import generator
from sifbench.vlm.model import ModelParams, forward
from sifbench.vlm.tokenizer import END_ID

LogitsHook = Callable[[torch.Tensor], torch.Tensor]

DECODE_MODES = ("greedy", "sample")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0
    max_len: int = 112

    def __post_init__(self) -> None:
        if self.mode not in DECODE_MODES:
            raise ParameterError(f"Decode mode must be one of {DECODE_MODES}, got {self.mode!r}.")
        if not (self.temperature > 0) or not math.isfinite(self.temperature):
            raise ParameterError("temperature must be a finite positive number.")
        if not (0 < self.top_p <= 1):
            raise ParameterError("top_p must lie in (0, 1].")
        if int(self.max_len) != self.max_len or self.max_len < 1:
            raise ParameterError("max_len must be a positive integer.")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "DecodeConfig":
        data = dict(data or {})
        known = {key: data[key] for key in cls.__dataclass_fields__ if key in data}
        return cls(**known)

    def with_seed(self, seed: int) -> "DecodeConfig":
        return DecodeConfig(self.mode, self.temperature, self.top_p, int(seed), self.max_len)


def _select(row: torch.Tensor, cfg: DecodeConfig, gen: torch.Generator | None) -> int:
    if cfg.mode == "greedy":
        # argmax returns the first maximal index, so ties go to the lowest id.
        return int(torch.argmax(row))
    probs = torch.softmax(row / cfg.temperature, dim=-1)
    if cfg.top_p < 1.0:
        sorted_probs, order = torch.sort(probs, descending=True, stable=True)
        cumulative = torch.cumsum(sorted_probs, dim=-1)
        drop = (cumulative - sorted_probs) >= cfg.top_p
        sorted_probs = sorted_probs.masked_fill(drop, 0.0)
        probs = torch.zeros_like(probs).scatter(0, order, sorted_probs)
    probs = probs / probs.sum()
    return int(torch.multinomial(probs, 1, generator=gen))


def decode(
    params: ModelParams,
    image: torch.Tensor | None,
    prompt: Sequence[int],
    decode_cfg: DecodeConfig | None = None,
    *,
    logits_hook: LogitsHook | None = None,
) -> list[int]:
    """Autoregressive decoding; the end token stops generation and is not returned."""
    cfg = decode_cfg or DecodeConfig()
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise DegenerateInputError("Decoding needs a nonempty prompt.")
    capacity = params.config.text_capacity if image is not None else params.config.max_seq_len
    if len(prompt) + cfg.max_len - 1 > capacity:
        raise CapacityError(
            f"Prompt of {len(prompt)} tokens plus max_len={cfg.max_len} exceeds text capacity {capacity}."
        )
    gen = generator(cfg.seed, "decode") if cfg.mode == "sample" else None
    tokens = list(prompt)
    out: list[int] = []
    with torch.no_grad():
        for _ in range(cfg.max_len):
            row = forward(params, image, tokens).logits[-1]
            if logits_hook is not None:
                row = logits_hook(row)
            nxt = _select(row, cfg, gen)
            if nxt == END_ID:
                break
            out.append(nxt)
            tokens.append(nxt)
    return out


def perplexity(
    params: ModelParams,
    tokens: Sequence[int],
    *,
    image: torch.Tensor | None = None,
    score_from: int = 1,
) -> float:
    """exp of the mean next-token NLL of ``tokens[score_from:]`` given everything before."""
    tokens = [int(t) for t in tokens]
    if len(tokens) < 2:
        raise DegenerateInputError("Perplexity needs at least two tokens.")
    if not 1 <= score_from < len(tokens):
        raise ParameterError(f"score_from must lie in [1, {len(tokens) - 1}].")
    with torch.no_grad():
        logits = forward(params, image, tokens[:-1]).logits
        log_probs = torch.log_softmax(logits[score_from - 1 :], dim=-1)
        targets = torch.as_tensor(tokens[score_from:], dtype=torch.long)
        nll = -log_probs.gather(1, targets.unsqueeze(1)).squeeze(1)
    return float(torch.exp(nll.mean()))
