"""Trigger-image distillation: PGD on a bounded image perturbation so that plain
decoding of the frozen model carries the watermark while staying close to the
teacher response."""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import torch
from tqdm import tqdm

from sifbench.errors import (
    DegenerateInputError,
    InvariantViolation,
    OptimizationDiverged,
    ParameterError,
    ShapeError,
    TriggerSpecRejected,
)
from sifbench.pipeline.corpus import make_sample
from sifbench.utils.console import debug, info, progress_disabled
from sifbench.vlm.decoding import DecodeConfig, decode
from sifbench.vlm.model import DTYPE, ForwardTrace, ModelParams, check_image, evaluate_loss
from sifbench.vlm.tokenizer import encode
from sifbench.wmark import GreenMask, WatermarkKey, WatermarkParams, detect, green_list, watermarked_decode

MIN_RESPONSE_TOKENS = 80
GREEN_MASS_FLOOR = 1e-12

# (current image) -> per-layer tensors injected into the forward pass, or None.
Perturbation = Callable[[torch.Tensor], Sequence[torch.Tensor] | None]


@dataclass(frozen=True)
class DistillConfig:
    epsilon: float = 16 / 255
    alpha: float = 1 / 255
    steps: int = 1000
    top_k: int = 50
    lambda_wm: float = 0.5
    lambda_ce: float = 0.5
    seed: int = 0
    record_every: int = 50

    def __post_init__(self) -> None:
        if not (0 < self.alpha <= self.epsilon <= 1):
            raise ParameterError("Need 0 < alpha <= epsilon <= 1.")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ParameterError("steps must be a positive integer.")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ParameterError("top_k must be a positive integer.")
        if self.lambda_wm < 0 or self.lambda_ce < 0:
            raise ParameterError("Loss weights must be nonnegative.")
        if self.record_every < 1:
            raise ParameterError("record_every must be positive.")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "DistillConfig":
        data = dict(data or {})
        return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})


@dataclass(frozen=True)
class TriggerSpec:
    base_image: torch.Tensor
    prompt: list[int]
    key_digest: str
    teacher_response: list[int]
    trigger_id: str = "t000"

    def __post_init__(self) -> None:
        if len(self.teacher_response) < MIN_RESPONSE_TOKENS:
            raise TriggerSpecRejected(
                f"Teacher response has {len(self.teacher_response)} tokens; "
                f"at least {MIN_RESPONSE_TOKENS} are required."
            )
        if not self.prompt:
            raise DegenerateInputError("Trigger prompt must be nonempty.")


@dataclass(frozen=True)
class TriggerArtifact:
    trigger_image: torch.Tensor
    spec: TriggerSpec
    distill_config: DistillConfig
    initial_losses: dict[str, float]
    final_losses: dict[str, float]
    history: list[dict[str, float]] = field(default_factory=list)
    initial_z: float | None = None
    final_z: float | None = None
    threshold: float | None = None
    rho: float | None = None
    injected_norms: list[float] = field(default_factory=list)

    @property
    def trigger_id(self) -> str:
        return self.spec.trigger_id

    def with_threshold(self, tau: float | None) -> "TriggerArtifact":
        return replace(self, threshold=tau)

    def with_rho(self, rho: float, injected_norms: list[float]) -> "TriggerArtifact":
        return replace(self, rho=float(rho), injected_norms=list(injected_norms))


@dataclass(frozen=True)
class LossSpec:
    """Weighted watermark-alignment plus teacher cross-entropy, both teacher-forced on the response."""

    mask: GreenMask
    top_k: int = 50
    lambda_wm: float = 0.5
    lambda_ce: float = 0.5
    scale: float = 1.0

    def terms(self, trace: ForwardTrace, prompt_len: int, response: torch.Tensor) -> dict[str, torch.Tensor]:
        wm = loss_wm(trace, self.mask, self.top_k, prompt_len=prompt_len, response_len=int(response.numel()))
        ce = loss_ce(trace, response, prompt_len=prompt_len)
        total = self.scale * (self.lambda_wm * wm + self.lambda_ce * ce)
        return {"total": total, "wm": wm, "ce": ce}


def response_logits(trace: ForwardTrace, prompt_len: int, response_len: int) -> torch.Tensor:
    """Rows predicting each response token under teacher forcing on ``prompt + response[:-1]``."""
    if response_len < 1:
        raise DegenerateInputError("Response must contain at least one token.")
    if prompt_len < 1:
        raise DegenerateInputError("Prompt must contain at least one token.")
    if trace.logits.shape[0] != prompt_len + response_len - 1:
        raise ShapeError(
            f"Trace has {trace.logits.shape[0]} text rows; expected {prompt_len + response_len - 1} "
            f"for prompt {prompt_len} and response {response_len}."
        )
    return trace.logits[prompt_len - 1 : prompt_len - 1 + response_len]


def loss_wm(
    trace: ForwardTrace,
    mask: GreenMask,
    top_k: int,
    *,
    prompt_len: int,
    response_len: int,
) -> torch.Tensor:
    rows = response_logits(trace, prompt_len, response_len)
    if rows.shape[-1] != mask.vocab_size:
        raise ShapeError("Green mask and logits disagree on vocabulary size.")
    k = min(int(top_k), rows.shape[-1])
    probs = torch.softmax(rows, dim=-1)
    top_probs, top_ids = torch.topk(probs, k, dim=-1)
    green = mask.membership[top_ids].to(DTYPE)
    mass = (top_probs * green).sum(dim=-1) / top_probs.sum(dim=-1)
    return -torch.log(mass.clamp_min(GREEN_MASS_FLOOR)).mean()


def loss_ce(trace: ForwardTrace, response: torch.Tensor | Sequence[int], *, prompt_len: int) -> torch.Tensor:
    targets = torch.as_tensor(list(response) if not isinstance(response, torch.Tensor) else response, dtype=torch.long)
    rows = response_logits(trace, prompt_len, int(targets.numel()))
    log_probs = torch.log_softmax(rows, dim=-1)
    return -log_probs.gather(1, targets.unsqueeze(1)).squeeze(1).mean()


def teacher_generate(
    params: ModelParams,
    base_image: torch.Tensor,
    prompt: Sequence[int],
    key: WatermarkKey,
    wparams: WatermarkParams,
    max_len: int = 112,
    decode_cfg: DecodeConfig | None = None,
) -> list[int]:
    response = watermarked_decode(params, base_image, prompt, key, wparams, max_len, decode_cfg)
    if len(response) < MIN_RESPONSE_TOKENS:
        raise TriggerSpecRejected(
            f"Teacher response has {len(response)} tokens; at least {MIN_RESPONSE_TOKENS} are required."
        )
    return response


def build_trigger_specs(
    params: ModelParams,
    key: WatermarkKey,
    wparams: WatermarkParams,
    *,
    count: int,
    seed: int,
    max_attempts: int | None = None,
    max_len: int = 112,
    prompts: Sequence[str] | None = None,
    min_teacher_gain: float | None = None,
) -> list[TriggerSpec]:
    """Walk seeded (image, prompt) candidates until ``count`` teacher responses are accepted.

    A candidate needs a long enough teacher response and, when ``min_teacher_gain`` is set,
    a teacher z-score at least that far above the z-score of the model's plain greedy answer.
    """
    if count < 1:
        raise ParameterError("count must be positive.")
    attempts = max_attempts if max_attempts is not None else 10 * count
    plain_cfg = DecodeConfig(max_len=max_len)
    vocab = params.config.vocab_size
    specs: list[TriggerSpec] = []
    rejected = 0
    for attempt in range(attempts):
        sample = make_sample(seed, attempt, params.config.image_size, stream="trigger")
        text = prompts[attempt % len(prompts)] if prompts else sample.prompt
        prompt = encode(text)
        try:
            response = teacher_generate(params, sample.image, prompt, key, wparams, max_len)
        except TriggerSpecRejected as exc:
            rejected += 1
            debug(f"Candidate {attempt} rejected: {exc}")
            continue
        if min_teacher_gain is not None:
            plain_z, _ = response_z(params, sample.image, prompt, key, wparams, plain_cfg)
            gain = detect(response, key, wparams, vocab).z_score - (plain_z if plain_z is not None else 0.0)
            if gain < min_teacher_gain:
                rejected += 1
                debug(f"Candidate {attempt} rejected: teacher gain {gain:.3f} < {min_teacher_gain}")
                continue
        specs.append(TriggerSpec(sample.image, prompt, key.digest(), response, trigger_id=f"t{len(specs):03d}"))
        if len(specs) == count:
            info(f"[green]Accepted {count} trigger specs[/green] ({rejected} candidates rejected).")
            return specs
    raise TriggerSpecRejected(
        f"Only {len(specs)} of {count} trigger specs accepted after {attempts} candidates."
    )


def _budget_bounds(base: torch.Tensor, epsilon: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Box [lo, hi] around ``base`` with |v - base| <= epsilon holding in floating point."""
    lo = base - epsilon
    hi = base + epsilon
    for _ in range(4):
        bad_lo = (base - lo) > epsilon
        bad_hi = (hi - base) > epsilon
        if not bool(bad_lo.any()) and not bool(bad_hi.any()):
            break
        lo = torch.where(bad_lo, torch.nextafter(lo, base), lo)
        hi = torch.where(bad_hi, torch.nextafter(hi, base), hi)
    return lo, hi


def pgd_step(
    current: torch.Tensor,
    grad: torch.Tensor,
    alpha: float,
    base_image: torch.Tensor,
    epsilon: float,
) -> torch.Tensor:
    if current.shape != grad.shape or current.shape != base_image.shape:
        raise ShapeError("Image, gradient and base image shapes must agree.")
    stepped = current - alpha * torch.sign(grad)
    lo, hi = _budget_bounds(base_image, epsilon)
    return torch.minimum(torch.maximum(stepped, lo), hi).clamp(0.0, 1.0)


def check_feasible(image: torch.Tensor, base_image: torch.Tensor, epsilon: float) -> None:
    gap = float((image - base_image).abs().max())
    if gap > epsilon:
        raise InvariantViolation(f"Trigger left the budget: |x' - x|_inf = {gap!r} > {epsilon!r}.")
    if bool((image < 0).any()) or bool((image > 1).any()):
        raise InvariantViolation("Trigger pixels left [0, 1].")


def response_z(
    params: ModelParams,
    image: torch.Tensor,
    prompt: Sequence[int],
    key: WatermarkKey,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None = None,
) -> tuple[float | None, list[int]]:
    """Decode without the watermark and score the response; None when nothing was emitted."""
    response = decode(params, image, prompt, decode_cfg)
    if not response:
        return None, response
    return detect(response, key, wparams, params.config.vocab_size).z_score, response


def optimize_trigger(
    params: ModelParams,
    spec: TriggerSpec,
    cfg: DistillConfig,
    key: WatermarkKey,
    wparams: WatermarkParams,
    *,
    decode_cfg: DecodeConfig | None = None,
    perturbation: Perturbation | None = None,
    start: torch.Tensor | None = None,
    desc: str = "SAFD",
) -> TriggerArtifact:
    """Shared PGD loop. ``perturbation`` supplies per-step activation shifts (RFO); None is plain SAFD.

    ``start`` warm-starts from a feasible image instead of the base image.
    """
    if key.digest() != spec.key_digest:
        raise ParameterError("Trigger spec was built under a different watermark key.")
    base = check_image(spec.base_image, params.config)
    mask = green_list(key, params.config.vocab_size, wparams.gamma)
    loss_spec = LossSpec(mask, cfg.top_k, cfg.lambda_wm, cfg.lambda_ce)
    prompt, response = list(spec.prompt), list(spec.teacher_response)

    initial = evaluate_loss(params, base, prompt, response, loss_spec, want_image_grad=False)
    initial_z, _ = response_z(params, base, prompt, key, wparams, decode_cfg)

    x = base.clone()
    if start is not None:
        x = check_image(start, params.config).clone()
        check_feasible(x, base, cfg.epsilon)
    history: list[dict[str, float]] = []
    for step in tqdm(range(cfg.steps), desc=f"{desc} {spec.trigger_id}", disable=progress_disabled(), leave=False):
        injected = perturbation(x) if perturbation is not None else None
        result = evaluate_loss(params, x, prompt, response, loss_spec, injected=injected)
        if not math.isfinite(result.total):
            raise OptimizationDiverged(f"{desc} {spec.trigger_id}: loss became non-finite at step {step}.")
        if step % cfg.record_every == 0:
            # History tracks the unperturbed objective even when RFO shifts activations.
            terms = result.terms
            if injected is not None:
                terms = evaluate_loss(params, x, prompt, response, loss_spec, want_image_grad=False).terms
            history.append({"step": step, **terms})
            debug(f"{desc} {spec.trigger_id} step {step}: {terms}")
        x = pgd_step(x, result.image_grad, cfg.alpha, base, cfg.epsilon)
        check_feasible(x, base, cfg.epsilon)

    final = evaluate_loss(params, x, prompt, response, loss_spec, want_image_grad=False)
    history.append({"step": cfg.steps, **final.terms})
    final_z, _ = response_z(params, x, prompt, key, wparams, decode_cfg)
    return TriggerArtifact(
        trigger_image=x,
        spec=spec,
        distill_config=cfg,
        initial_losses=initial.terms,
        final_losses=final.terms,
        history=history,
        initial_z=initial_z,
        final_z=final_z,
    )


def distill(
    params: ModelParams,
    spec: TriggerSpec,
    cfg: DistillConfig,
    key: WatermarkKey,
    wparams: WatermarkParams,
    *,
    decode_cfg: DecodeConfig | None = None,
    start: torch.Tensor | None = None,
) -> TriggerArtifact:
    return optimize_trigger(params, spec, cfg, key, wparams, decode_cfg=decode_cfg, start=start)
