"""Worst-case activation perturbation wrapped around trigger distillation.

Each PGD step runs two passes: the first takes activation gradients of the
distillation loss and turns them into a norm-``rho`` shift along the gradient;
the second evaluates the loss and the image gradient with that shift injected
as a constant.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, fields
from typing import Any

import torch

from sifbench.errors import InvariantViolation, ParameterError
from sifbench.pipeline.safd import DistillConfig, LossSpec, TriggerArtifact, TriggerSpec, distill, optimize_trigger
from sifbench.utils.console import debug, info
from sifbench.vlm.decoding import DecodeConfig
from sifbench.vlm.model import ActivationGrads, ModelParams, grad_activations
from sifbench.wmark import WatermarkKey, WatermarkParams, green_list

NORM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class RfoConfig(DistillConfig):
    rho: float = 0.5

    def __post_init__(self) -> None:
        super().__post_init__()
        if not (self.rho >= 0) or not math.isfinite(self.rho):
            raise ParameterError(f"rho must be a finite nonnegative number, got {self.rho!r}.")

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**{f.name: getattr(self, f.name) for f in fields(DistillConfig)})

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "RfoConfig":
        data = dict(data or {})
        return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})


def worst_case_perturbation(grads: ActivationGrads, rho: float) -> ActivationGrads:
    if rho < 0:
        raise ParameterError("rho must be nonnegative.")
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise ParameterError("Activation gradients must be finite.")
    norm = grads.global_norm()
    if norm == 0.0 or rho == 0.0:
        return ActivationGrads(tuple(torch.zeros_like(g) for g in grads))
    return ActivationGrads(tuple(g * (rho / norm) for g in grads))


def rfo_distill(
    params: ModelParams,
    spec: TriggerSpec,
    cfg: RfoConfig,
    key: WatermarkKey,
    wparams: WatermarkParams,
    *,
    decode_cfg: DecodeConfig | None = None,
) -> TriggerArtifact:
    base_cfg = cfg.distill_config()
    if cfg.rho == 0:
        return distill(params, spec, base_cfg, key, wparams, decode_cfg=decode_cfg).with_rho(0.0, [])

    mask = green_list(key, params.config.vocab_size, wparams.gamma)
    loss_spec = LossSpec(mask, cfg.top_k, cfg.lambda_wm, cfg.lambda_ce)
    prompt, response = list(spec.prompt), list(spec.teacher_response)
    norms: list[float] = []

    def _worst_case(image: torch.Tensor) -> list[torch.Tensor]:
        grads = grad_activations(params, image, prompt, response, loss_spec)
        shift = worst_case_perturbation(grads, cfg.rho)
        norm = shift.global_norm()
        if grads.global_norm() > 0 and abs(norm - cfg.rho) > NORM_TOLERANCE * max(1.0, cfg.rho):
            raise InvariantViolation(f"Injected norm {norm!r} differs from rho={cfg.rho!r}.")
        if len(norms) % cfg.record_every == 0:
            debug(f"RFO {spec.trigger_id} step {len(norms)}: injected norm {norm:.6g}")
        norms.append(norm)
        return list(shift.layers)

    artifact = optimize_trigger(
        params, spec, base_cfg, key, wparams, decode_cfg=decode_cfg, perturbation=_worst_case, desc="RFO"
    )
    info(f"RFO {spec.trigger_id}: rho={cfg.rho}, final z={artifact.final_z}")
    return artifact.with_rho(cfg.rho, norms)
