"""Post-release model modifications and query-time image corruptions.

Every function returns fresh tensors; inputs are never edited in place.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F

from sifbench.errors import ParameterError
from sifbench.pipeline.corpus import SyntheticTask
from sifbench.utils.rng import generator
from sifbench.vlm.model import DTYPE, ModelParams
from sifbench.vlm.training import train_next_token

MODEL_KINDS = ("identity", "quantize", "finetune", "prune", "weight_noise")
INPUT_KINDS = ("image_noise", "resize")
SCOPES = ("attn", "mlp", "both")
_EMBEDDINGS = ("tok_embed.weight", "pos_embed.weight")

_DEFAULTS: dict[str, dict[str, Any]] = {
    "identity": {},
    "quantize": {"bits": 8},
    "finetune": {"steps": 200, "lr": 0.05, "dataset_seed": 1, "samples": 256, "batch_size": 4},
    "prune": {"fraction": 0.2, "scope": "both"},
    "weight_noise": {"sigma": 0.002, "scope": "both", "seed": 0},
    "image_noise": {"noise": "uniform", "magnitude": 0.02, "seed": 0},
    "resize": {"size": 24},
}


@dataclass(frozen=True)
class MutationSpec:
    kind: str = "identity"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in _DEFAULTS:
            raise ParameterError(f"Unknown mutation kind {self.kind!r}; expected one of {sorted(_DEFAULTS)}.")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ParameterError(f"Mutation {self.kind} does not take {sorted(unknown)}.")
        merged = {**_DEFAULTS[self.kind], **dict(self.params)}
        object.__setattr__(self, "params", merged)
        self._validate(merged)

    def _validate(self, p: dict[str, Any]) -> None:
        if self.kind == "quantize" and p["bits"] not in (4, 8):
            raise ParameterError("bits must be 4 or 8.")
        if self.kind == "finetune":
            if p["steps"] < 0 or p["lr"] < 0 or p["batch_size"] < 1:
                raise ParameterError("finetune needs steps >= 0, lr >= 0 and batch_size >= 1.")
        if self.kind == "prune" and not 0.0 <= p["fraction"] <= 1.0:
            raise ParameterError("fraction must lie in [0, 1].")
        if self.kind == "weight_noise" and not (p["sigma"] >= 0):
            raise ParameterError("sigma must be nonnegative.")
        if "scope" in p and p["scope"] not in SCOPES:
            raise ParameterError(f"scope must be one of {SCOPES}.")
        if self.kind == "image_noise":
            if p["noise"] not in ("uniform", "gaussian"):
                raise ParameterError("noise must be 'uniform' or 'gaussian'.")
            if not (p["magnitude"] >= 0):
                raise ParameterError("magnitude must be nonnegative.")
        if self.kind == "resize" and (int(p["size"]) != p["size"] or p["size"] < 1):
            raise ParameterError("size must be a positive integer.")

    @property
    def input_level(self) -> bool:
        return self.kind in INPUT_KINDS

    def label(self) -> str:
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={self.params[k]}" for k in sorted(self.params))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MutationSpec":
        if "kind" not in data:
            raise ParameterError("Mutation spec needs a 'kind'.")
        return cls(str(data["kind"]), dict(data.get("params") or {}))


IDENTITY = MutationSpec()


def in_scope(name: str, scope: str) -> bool:
    if not name.endswith(".weight"):
        return False
    attn, mlp = ".attn." in name, ".mlp." in name
    return {"attn": attn, "mlp": mlp, "both": attn or mlp}[scope]


def quantize_tensor(tensor: torch.Tensor, bits: int) -> torch.Tensor:
    """Symmetric per-tensor fake quantization; all-zero tensors pass through."""
    levels = 2 ** (bits - 1) - 1
    amax = float(tensor.abs().max()) if tensor.numel() else 0.0
    if amax == 0.0:
        return tensor.clone()
    # Multiply before dividing so grid points such as +-amax map back exactly.
    return torch.round(tensor * levels / amax) * amax / levels


def quantize(params: ModelParams, bits: int) -> ModelParams:
    if bits not in (4, 8):
        raise ParameterError("bits must be 4 or 8.")
    updates = {
        name: quantize_tensor(t, bits)
        for name, t in params.tensors.items()
        if t.dim() == 2 and name not in _EMBEDDINGS
    }
    return params.replace(updates)


def finetune_run(
    params: ModelParams,
    task: SyntheticTask,
    steps: int,
    lr: float,
    *,
    batch_size: int = 4,
) -> tuple[ModelParams, list[float]]:
    if steps < 0 or lr < 0:
        raise ParameterError("steps and lr must be nonnegative.")
    if steps == 0 or lr == 0:
        return params.clone(), []
    return train_next_token(
        params,
        task.batch_fn(batch_size, params.config),
        steps=steps,
        lr=lr,
        optimizer="sgd",
        desc="Fine-tune",
    )


def finetune(params: ModelParams, task: SyntheticTask, steps: int, lr: float, *, batch_size: int = 4) -> ModelParams:
    return finetune_run(params, task, steps, lr, batch_size=batch_size)[0]


def prune(params: ModelParams, fraction: float, scope: str = "both") -> ModelParams:
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError("fraction must lie in [0, 1].")
    if scope not in SCOPES:
        raise ParameterError(f"scope must be one of {SCOPES}.")
    updates = {}
    for name, tensor in params.tensors.items():
        if not in_scope(name, scope):
            continue
        flat = tensor.reshape(-1).clone()
        count = math.floor(fraction * flat.numel())
        if count:
            order = torch.argsort(flat.abs(), stable=True)
            flat[order[:count]] = 0.0
        updates[name] = flat.reshape(tensor.shape)
    return params.replace(updates)


def perturb_weights(params: ModelParams, sigma: float, scope: str = "both", *, seed: int = 0) -> ModelParams:
    if not (sigma >= 0):
        raise ParameterError("sigma must be nonnegative.")
    if scope not in SCOPES:
        raise ParameterError(f"scope must be one of {SCOPES}.")
    if sigma == 0:
        return params.clone()
    updates = {}
    for name, tensor in params.tensors.items():
        if in_scope(name, scope):
            noise = torch.randn(tensor.shape, generator=generator(seed, f"weight-noise:{name}"), dtype=DTYPE)
            updates[name] = tensor + sigma * noise
    return params.replace(updates)


def perturb_image(image: torch.Tensor, kind: str, magnitude: float, *, seed: int = 0) -> torch.Tensor:
    if not (magnitude >= 0):
        raise ParameterError("magnitude must be nonnegative.")
    if magnitude == 0:
        return image.clone()
    gen = generator(seed, f"image-noise:{kind}")
    if kind == "uniform":
        noise = (torch.rand(image.shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * magnitude
    elif kind == "gaussian":
        noise = torch.randn(image.shape, generator=gen, dtype=DTYPE) * magnitude
    else:
        raise ParameterError("kind must be 'uniform' or 'gaussian'.")
    return (image + noise).clamp(0.0, 1.0)


def resize_image(image: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Corner-aligned bilinear resize of a (C, H, W) image."""
    if out_h < 1 or out_w < 1:
        raise ParameterError("Output dimensions must be positive.")
    if tuple(image.shape[-2:]) == (out_h, out_w):
        return image.clone()
    resized = F.interpolate(image.unsqueeze(0), size=(out_h, out_w), mode="bilinear", align_corners=True)
    return resized[0].clamp(0.0, 1.0)


def apply_mutation(params: ModelParams, spec: MutationSpec) -> ModelParams:
    """Model-level mutations; input-level kinds leave the weights untouched."""
    p = spec.params
    if spec.kind == "quantize":
        return quantize(params, int(p["bits"]))
    if spec.kind == "finetune":
        task = SyntheticTask(int(p["dataset_seed"]), int(p["samples"]))
        return finetune(params, task, int(p["steps"]), float(p["lr"]), batch_size=int(p["batch_size"]))
    if spec.kind == "prune":
        return prune(params, float(p["fraction"]), str(p["scope"]))
    if spec.kind == "weight_noise":
        return perturb_weights(params, float(p["sigma"]), str(p["scope"]), seed=int(p["seed"]))
    return params


def apply_to_image(image: torch.Tensor, spec: MutationSpec) -> torch.Tensor:
    """Query-time corruption of a trigger image; model-level kinds return the image as is."""
    p = spec.params
    if spec.kind == "image_noise":
        return perturb_image(image, str(p["noise"]), float(p["magnitude"]), seed=int(p["seed"]))
    if spec.kind == "resize":
        h, w = image.shape[-2:]
        small = resize_image(image, int(p["size"]), int(p["size"]))
        return resize_image(small, int(h), int(w))
    return image
