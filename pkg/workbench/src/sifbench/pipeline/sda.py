"""Reference-model gateway that spots fingerprint queries and swaps in a reference answer."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

import torch

from sifbench.errors import DegenerateInputError, ParameterError
from sifbench.pipeline.corpus import default_stopwords
from sifbench.utils.hashing import sha256_hex
from sifbench.utils.parallel import map_concurrently
from sifbench.vlm.decoding import DecodeConfig, decode, perplexity
from sifbench.vlm.model import DTYPE, ModelParams
from sifbench.vlm.tokenizer import encode

REASONS = ("ppl_gate", "lexical_divergence", "semantic_divergence", "none")


@dataclass(frozen=True)
class SdaConfig:
    ppl_threshold: float = 1000.0
    jaccard_threshold: float = 0.1
    sem_threshold: float = 0.0
    stopword_ids: frozenset[int] = field(default_factory=default_stopwords)

    def __post_init__(self) -> None:
        if not (self.ppl_threshold > 0):
            raise ParameterError("ppl_threshold must be positive.")
        if not 0.0 <= self.jaccard_threshold <= 1.0:
            raise ParameterError("jaccard_threshold must lie in [0, 1].")
        if not 0.0 <= self.sem_threshold <= 1.0:
            raise ParameterError("sem_threshold must lie in [0, 1].")
        object.__setattr__(self, "stopword_ids", frozenset(int(t) for t in self.stopword_ids))

    @property
    def semantic_enabled(self) -> bool:
        return self.sem_threshold > 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "jaccard_threshold": self.jaccard_threshold,
            "ppl_threshold": self.ppl_threshold,
            "sem_threshold": self.sem_threshold,
            "stopword_ids": sorted(self.stopword_ids),
        }


@dataclass(frozen=True)
class SdaDecision:
    flagged: bool
    reason: str
    served_response: list[int]
    stolen_response: list[int]
    reference_response: list[int]
    query_ppl: float
    jaccard: float | None = None
    sem_sim: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "flagged": self.flagged,
            "jaccard": self.jaccard,
            "query_ppl": self.query_ppl if math.isfinite(self.query_ppl) else None,
            "reason": self.reason,
            "reference_response": self.reference_response,
            "sem_sim": self.sem_sim,
            "served_response": self.served_response,
            "stolen_response": self.stolen_response,
        }


class Responder(Protocol):
    def respond(self, image: torch.Tensor, prompt: Sequence[int], decode_cfg: DecodeConfig | None) -> list[int]:
        ...


@dataclass(frozen=True)
class ModelResponder:
    params: ModelParams

    def respond(self, image: torch.Tensor, prompt: Sequence[int], decode_cfg: DecodeConfig | None) -> list[int]:
        return decode(self.params, image, prompt, decode_cfg)


def image_digest(image: torch.Tensor) -> str:
    return sha256_hex(image.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes())


@dataclass(frozen=True)
class FixedPhraseResponder:
    """Stolen model carrying a fixed-phrase fingerprint: registered trigger images get the phrase."""

    params: ModelParams
    trigger_digests: frozenset[str]
    phrase: list[int] = field(default_factory=lambda: encode("OWNER FINGERPRINT MARK PHRASE"))

    @classmethod
    def for_images(cls, params: ModelParams, images: Iterable[torch.Tensor], phrase: str | None = None):
        digests = frozenset(image_digest(img) for img in images)
        if phrase is None:
            return cls(params, digests)
        return cls(params, digests, encode(phrase))

    def respond(self, image: torch.Tensor, prompt: Sequence[int], decode_cfg: DecodeConfig | None) -> list[int]:
        if image_digest(image) in self.trigger_digests:
            return list(self.phrase)
        return decode(self.params, image, prompt, decode_cfg)


def _as_responder(model: ModelParams | Responder) -> Responder:
    return ModelResponder(model) if isinstance(model, ModelParams) else model


def jaccard_nonstop(a: Sequence[int], b: Sequence[int], stopwords: Iterable[int]) -> float:
    stop = set(stopwords)
    left = {int(t) for t in a} - stop
    right = {int(t) for t in b} - stop
    union = left | right
    if not union:
        return 1.0
    return len(left & right) / len(union)


def semantic_sim(a: Sequence[int], b: Sequence[int], reference_params: ModelParams) -> float:
    """Cosine of mean token embeddings; pooling in sorted id order keeps it order-free."""
    if not a or not b:
        raise DegenerateInputError("Semantic similarity needs two nonempty sequences.")
    table = reference_params["tok_embed.weight"]
    left = table[torch.as_tensor(sorted(int(t) for t in a))].mean(dim=0)
    right = table[torch.as_tensor(sorted(int(t) for t in b))].mean(dim=0)
    denom = float(left.norm()) * float(right.norm())
    if denom == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float(torch.dot(left, right)) / denom))


def sda_serve(
    stolen: ModelParams | Responder,
    reference_params: ModelParams,
    image: torch.Tensor,
    prompt: Sequence[int],
    cfg: SdaConfig | None = None,
    decode_cfg: DecodeConfig | None = None,
) -> SdaDecision:
    cfg = cfg or SdaConfig()
    prompt = [int(t) for t in prompt]
    if len(prompt) < 2:
        raise DegenerateInputError("The gateway needs prompts of at least two tokens.")
    query_ppl = perplexity(reference_params, prompt)
    stolen_model = _as_responder(stolen)
    reference_model = ModelResponder(reference_params)
    stolen_response, reference_response = map_concurrently(
        lambda model: model.respond(image, prompt, decode_cfg), [stolen_model, reference_model], limit=2
    )

    def _decide(reason: str, jaccard: float | None = None, sem: float | None = None) -> SdaDecision:
        flagged = reason != "none"
        return SdaDecision(
            flagged=flagged,
            reason=reason,
            served_response=list(reference_response if flagged else stolen_response),
            stolen_response=list(stolen_response),
            reference_response=list(reference_response),
            query_ppl=query_ppl,
            jaccard=jaccard,
            sem_sim=sem,
        )

    if query_ppl > cfg.ppl_threshold:
        return _decide("ppl_gate")
    jaccard = jaccard_nonstop(stolen_response, reference_response, cfg.stopword_ids)
    if jaccard < cfg.jaccard_threshold:
        return _decide("lexical_divergence", jaccard)
    if cfg.semantic_enabled and stolen_response and reference_response:
        sem = semantic_sim(stolen_response, reference_response, reference_params)
        if sem < cfg.sem_threshold:
            return _decide("semantic_divergence", jaccard, sem)
        return _decide("none", jaccard, sem)
    return _decide("none", jaccard)


def serve_all(
    stolen: ModelParams | Responder,
    reference_params: ModelParams,
    queries: Sequence[tuple[torch.Tensor, Sequence[int]]],
    cfg: SdaConfig | None = None,
    decode_cfg: DecodeConfig | None = None,
    *,
    concurrency: int = 1,
) -> list[SdaDecision]:
    if not queries:
        raise ParameterError("Need at least one query.")
    return map_concurrently(
        lambda query: sda_serve(stolen, reference_params, query[0], query[1], cfg, decode_cfg),
        list(queries),
        limit=concurrency,
        progress_desc="SDA queries",
    )


def false_positive_rate(
    stolen: ModelParams | Responder,
    reference_params: ModelParams,
    queries: Sequence[tuple[torch.Tensor, Sequence[int]]],
    cfg: SdaConfig | None = None,
    decode_cfg: DecodeConfig | None = None,
    *,
    concurrency: int = 1,
) -> float:
    decisions = serve_all(stolen, reference_params, queries, cfg, decode_cfg, concurrency=concurrency)
    return sum(d.flagged for d in decisions) / len(decisions)


def summarize(decisions: Sequence[SdaDecision]) -> dict[str, Any]:
    counts = Counter(d.reason for d in decisions)
    total = len(decisions)
    flagged = sum(d.flagged for d in decisions)
    return {
        "by_reason": {reason: counts.get(reason, 0) for reason in REASONS},
        "flag_rate": flagged / total if total else 0.0,
        "flag_rate_by_reason": {reason: (counts.get(reason, 0) / total if total else 0.0) for reason in REASONS},
        "flagged": flagged,
        "queries": total,
    }
