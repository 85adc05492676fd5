"""Toy vision-language model: patch embedding front end plus a causal decoder.

Parameters live in a flat name -> tensor map and the forward pass is functional,
so gradients can be taken with respect to the image or any block output without
touching the weights.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from types import MappingProxyType
from typing import Any, Protocol

import torch
import torch.nn.functional as F

from sifbench.errors import CapacityError, DegenerateInputError, ParameterError, ShapeError
from sifbench.utils.rng import generator

DTYPE = torch.float64
# Pixels are centred and scaled before the patch projection so the image
# carries as much weight in the residual stream as the token embeddings.
PIXEL_CENTER = 0.5
PIXEL_GAIN = 4.0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    vocab_size: int = 512
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    max_seq_len: int = 160

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ParameterError(f"ModelConfig.{name} must be a positive integer, got {value!r}.")
        if self.image_size % self.patch_size:
            raise ParameterError("image_size must be divisible by patch_size.")
        if self.embed_dim % self.heads:
            raise ParameterError("embed_dim must be divisible by heads.")
        if self.vocab_size < 2:
            raise ParameterError("vocab_size must be at least 2.")
        if self.num_patches >= self.max_seq_len:
            raise ParameterError("max_seq_len leaves no room for text after the image patches.")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def text_capacity(self) -> int:
        return self.max_seq_len - self.num_patches

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {key: int(data[key]) for key in cls.__dataclass_fields__ if key in data}
        return cls(**known)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in canonical (checkpoint) order."""
    d = config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.weight": (d, config.patch_dim),
        "patch_proj.bias": (d,),
        "tok_embed.weight": (config.vocab_size, d),
        "pos_embed.weight": (config.max_seq_len, d),
    }
    for layer in range(config.layers):
        prefix = f"blocks.{layer}"
        shapes[f"{prefix}.ln1.weight"] = (d,)
        shapes[f"{prefix}.ln1.bias"] = (d,)
        shapes[f"{prefix}.attn.qkv.weight"] = (3 * d, d)
        shapes[f"{prefix}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{prefix}.attn.out.weight"] = (d, d)
        shapes[f"{prefix}.attn.out.bias"] = (d,)
        shapes[f"{prefix}.ln2.weight"] = (d,)
        shapes[f"{prefix}.ln2.bias"] = (d,)
        shapes[f"{prefix}.mlp.fc.weight"] = (4 * d, d)
        shapes[f"{prefix}.mlp.fc.bias"] = (4 * d,)
        shapes[f"{prefix}.mlp.proj.weight"] = (d, 4 * d)
        shapes[f"{prefix}.mlp.proj.bias"] = (d,)
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["head.weight"] = (config.vocab_size, d)
    shapes["head.bias"] = (config.vocab_size,)
    return shapes


@dataclass(frozen=True)
class ModelParams:
    """Immutable weight set. Mutations build a new instance instead of editing tensors."""

    config: ModelConfig
    tensors: Mapping[str, torch.Tensor]

    def __post_init__(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"Parameter names disagree with config (missing={missing}, extra={extra}).")
        ordered = {}
        for name, shape in expected.items():
            tensor = self.tensors[name]
            if tuple(tensor.shape) != shape:
                raise ShapeError(f"{name} has shape {tuple(tensor.shape)}, expected {shape}.")
            if tensor.dtype != DTYPE:
                raise ShapeError(f"{name} must be float64, got {tensor.dtype}.")
            if not bool(torch.isfinite(tensor).all()):
                raise ParameterError(f"{name} contains non-finite values.")
            ordered[name] = tensor
        object.__setattr__(self, "tensors", MappingProxyType(ordered))

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def replace(self, updates: Mapping[str, torch.Tensor]) -> "ModelParams":
        merged = dict(self.tensors)
        merged.update(updates)
        return ModelParams(self.config, merged)

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {name: t.detach().clone() for name, t in self.tensors.items()})


@dataclass(frozen=True)
class ForwardTrace:
    """Post-block activations (before any injection) and text-position logits."""

    activations: tuple[torch.Tensor, ...]
    logits: torch.Tensor
    prefix_len: int = 0

    @property
    def layer_shapes(self) -> list[tuple[int, ...]]:
        return [tuple(a.shape) for a in self.activations]


@dataclass(frozen=True)
class ActivationGrads:
    layers: tuple[torch.Tensor, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def global_norm(self) -> float:
        total = sum(float((g * g).sum()) for g in self.layers)
        return math.sqrt(total)

    @classmethod
    def zeros_like(cls, trace: ForwardTrace) -> "ActivationGrads":
        return cls(tuple(torch.zeros_like(a) for a in trace.activations))


class ScalarLoss(Protocol):
    def terms(self, trace: ForwardTrace, prompt_len: int, response: torch.Tensor) -> dict[str, torch.Tensor]:
        """Return at least ``{"total": scalar}``; other entries are reported, not differentiated."""


def init_model(seed: int, config: ModelConfig | None = None) -> ModelParams:
    config = config or ModelConfig()
    out_scale = 1.0 / math.sqrt(2.0 * config.layers)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = torch.zeros(shape, dtype=DTYPE)
            continue
        if ".ln" in name or name.startswith("ln_f"):
            tensors[name] = torch.ones(shape, dtype=DTYPE)
            continue
        if name == "tok_embed.weight":
            std = 1.0
        elif name == "pos_embed.weight":
            std = 0.5
        else:
            std = 1.0 / math.sqrt(shape[1])
            if name.endswith("attn.out.weight") or name.endswith("mlp.proj.weight"):
                std *= out_scale
        tensors[name] = torch.randn(shape, generator=generator(seed, f"init:{name}"), dtype=DTYPE) * std
    return ModelParams(config, tensors)


def check_image(image: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    if tuple(image.shape) != config.image_shape:
        raise ShapeError(f"Image shape {tuple(image.shape)} does not match {config.image_shape}.")
    if image.dtype != DTYPE:
        image = image.to(DTYPE)
    if not bool(torch.isfinite(image).all()):
        raise ParameterError("Image contains non-finite values.")
    if bool((image < 0).any()) or bool((image > 1).any()):
        raise ParameterError("Image values must lie in [0, 1].")
    return image


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, num_patches, C*P*P), patches in row-major order."""
    b, c, _, _ = images.shape
    patches = images.unfold(2, patch_size, patch_size).unfold(3, patch_size, patch_size)
    patches = patches.permute(0, 2, 3, 1, 4, 5)
    return patches.reshape(b, -1, c * patch_size * patch_size)


def _block(weights: Mapping[str, torch.Tensor], layer: int, h: torch.Tensor, heads: int) -> torch.Tensor:
    prefix = f"blocks.{layer}"
    b, s, d = h.shape
    head_dim = d // heads
    x = F.layer_norm(h, (d,), weights[f"{prefix}.ln1.weight"], weights[f"{prefix}.ln1.bias"])
    qkv = F.linear(x, weights[f"{prefix}.attn.qkv.weight"], weights[f"{prefix}.attn.qkv.bias"])
    q, k, v = (t.reshape(b, s, heads, head_dim).transpose(1, 2) for t in qkv.split(d, dim=-1))
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(head_dim)
    causal = torch.ones(s, s, dtype=torch.bool).tril()
    scores = scores.masked_fill(~causal, float("-inf"))
    attended = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, s, d)
    h = h + F.linear(attended, weights[f"{prefix}.attn.out.weight"], weights[f"{prefix}.attn.out.bias"])
    x = F.layer_norm(h, (d,), weights[f"{prefix}.ln2.weight"], weights[f"{prefix}.ln2.bias"])
    hidden = F.gelu(F.linear(x, weights[f"{prefix}.mlp.fc.weight"], weights[f"{prefix}.mlp.fc.bias"]))
    return h + F.linear(hidden, weights[f"{prefix}.mlp.proj.weight"], weights[f"{prefix}.mlp.proj.bias"])


def run_batch(
    weights: Mapping[str, torch.Tensor],
    config: ModelConfig,
    images: torch.Tensor | None,
    tokens: torch.Tensor,
    injected: Sequence[torch.Tensor] | None = None,
) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Batched forward over raw weights; returns (block outputs, text logits).

    ``images`` is (B, C, H, W) or None for text-only scoring, ``tokens`` is (B, T).
    ``injected[l]`` is added to block ``l``'s output before it feeds block ``l + 1``.
    """
    d = config.embed_dim
    parts = []
    if images is not None:
        patches = patchify((images - PIXEL_CENTER) * PIXEL_GAIN, config.patch_size)
        parts.append(F.linear(patches, weights["patch_proj.weight"], weights["patch_proj.bias"]))
    parts.append(F.embedding(tokens, weights["tok_embed.weight"]))
    h = torch.cat(parts, dim=1)
    seq_len = h.shape[1]
    if seq_len == 0:
        raise DegenerateInputError("Forward pass needs at least one position.")
    if seq_len > config.max_seq_len:
        raise CapacityError(f"Sequence of {seq_len} positions exceeds max_seq_len={config.max_seq_len}.")
    h = h + weights["pos_embed.weight"][:seq_len]
    if injected is not None and len(injected) != config.layers:
        raise ShapeError(f"Expected {config.layers} injected tensors, got {len(injected)}.")

    activations = []
    for layer in range(config.layers):
        h = _block(weights, layer, h, config.heads)
        activations.append(h)
        if injected is not None:
            if injected[layer].shape[-2:] != h.shape[-2:]:
                raise ShapeError(
                    f"Injected tensor for layer {layer} has shape {tuple(injected[layer].shape)}, "
                    f"activation has {tuple(h.shape[1:])}."
                )
            h = h + injected[layer]
    h = F.layer_norm(h, (d,), weights["ln_f.weight"], weights["ln_f.bias"])
    text = h[:, seq_len - tokens.shape[1] :, :]
    return activations, F.linear(text, weights["head.weight"], weights["head.bias"])


def forward(
    params: ModelParams,
    image: torch.Tensor | None,
    tokens: Sequence[int] | torch.Tensor,
    injected: ActivationGrads | Sequence[torch.Tensor] | None = None,
) -> ForwardTrace:
    config = params.config
    token_tensor = torch.as_tensor(tokens, dtype=torch.long).reshape(1, -1)
    if token_tensor.numel() and (int(token_tensor.min()) < 0 or int(token_tensor.max()) >= config.vocab_size):
        raise ParameterError("Token ids must lie in [0, vocab_size).")
    images = None if image is None else check_image(image, config).unsqueeze(0)
    layers = list(injected) if injected is not None else None
    activations, logits = run_batch(params.tensors, config, images, token_tensor, layers)
    prefix = config.num_patches if image is not None else 0
    return ForwardTrace(tuple(a[0] for a in activations), logits[0], prefix)


def teacher_forced_input(prompt: Sequence[int], response: Sequence[int]) -> list[int]:
    """Tokens fed to the model so every response token is predicted once."""
    return list(prompt) + list(response[:-1])


@dataclass(frozen=True)
class LossEvaluation:
    total: float
    terms: dict[str, float]
    trace: ForwardTrace
    image_grad: torch.Tensor | None = None
    activation_grads: ActivationGrads | None = None


def evaluate_loss(
    params: ModelParams,
    image: torch.Tensor,
    prompt: Sequence[int],
    response: Sequence[int],
    loss_spec: ScalarLoss,
    *,
    injected: ActivationGrads | Sequence[torch.Tensor] | None = None,
    want_image_grad: bool = True,
    want_activation_grads: bool = False,
) -> LossEvaluation:
    """One teacher-forced forward plus the requested reverse-mode gradients.

    Injected tensors are constants: no gradient flows into them.
    """
    if len(prompt) < 1 or len(response) < 1:
        raise DegenerateInputError("Prompt and response must both be nonempty.")
    image_leaf = image.detach().clone().to(DTYPE).requires_grad_(want_image_grad)
    shifts = None
    if want_activation_grads:
        # Zero bumps on every block output: d loss / d bump == d loss / d h_l.
        positions = params.config.num_patches + len(prompt) + len(response) - 1
        shifts = [
            torch.zeros(positions, params.config.embed_dim, dtype=DTYPE, requires_grad=True)
            for _ in range(params.config.layers)
        ]
    layers = [t.detach() for t in injected] if injected is not None else None
    if shifts is not None:
        layers = shifts if layers is None else [c + p for c, p in zip(layers, shifts)]

    with torch.enable_grad():
        trace = forward(params, image_leaf, teacher_forced_input(prompt, response), layers)
        response_tensor = torch.as_tensor(list(response), dtype=torch.long)
        terms = loss_spec.terms(trace, len(prompt), response_tensor)
        total = terms["total"]
        inputs = ([image_leaf] if want_image_grad else []) + (shifts or [])
        grads: Sequence[torch.Tensor | None] = [None] * len(inputs)
        if inputs and total.requires_grad:
            grads = torch.autograd.grad(total, inputs, allow_unused=True)

    image_grad = None
    activation_grads = None
    offset = 0
    if want_image_grad:
        image_grad = grads[0].detach() if grads[0] is not None else torch.zeros_like(image_leaf).detach()
        offset = 1
    if shifts is not None:
        activation_grads = ActivationGrads(
            tuple(
                (g.detach() if g is not None else torch.zeros_like(p))
                for g, p in zip(grads[offset:], shifts)
            )
        )
    detached = ForwardTrace(
        tuple(a.detach() for a in trace.activations), trace.logits.detach(), trace.prefix_len
    )
    return LossEvaluation(
        total=float(total.detach()),
        terms={name: float(value.detach()) for name, value in terms.items()},
        trace=detached,
        image_grad=image_grad,
        activation_grads=activation_grads,
    )


def grad_image(
    params: ModelParams,
    image: torch.Tensor,
    prompt: Sequence[int],
    response: Sequence[int],
    loss_spec: ScalarLoss,
    *,
    injected: ActivationGrads | Sequence[torch.Tensor] | None = None,
) -> torch.Tensor:
    result = evaluate_loss(params, image, prompt, response, loss_spec, injected=injected)
    assert result.image_grad is not None
    return result.image_grad


def grad_activations(
    params: ModelParams,
    image: torch.Tensor,
    prompt: Sequence[int],
    response: Sequence[int],
    loss_spec: ScalarLoss,
) -> ActivationGrads:
    result = evaluate_loss(
        params,
        image,
        prompt,
        response,
        loss_spec,
        want_image_grad=False,
        want_activation_grads=True,
    )
    assert result.activation_grads is not None
    return result.activation_grads
