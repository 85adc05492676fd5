"""Toy vision-language model with exact reverse-mode gradients."""

from sifbench.vlm.checkpoint import load_checkpoint, params_digest, save_checkpoint
from sifbench.vlm.decoding import DecodeConfig, decode, perplexity
from sifbench.vlm.model import (
    ActivationGrads,
    ForwardTrace,
    ModelConfig,
    ModelParams,
    forward,
    grad_activations,
    grad_image,
    init_model,
)

__all__ = [
    "ActivationGrads",
    "DecodeConfig",
    "ForwardTrace",
    "ModelConfig",
    "ModelParams",
    "decode",
    "forward",
    "grad_activations",
    "grad_image",
    "init_model",
    "load_checkpoint",
    "params_digest",
    "perplexity",
    "save_checkpoint",
]
