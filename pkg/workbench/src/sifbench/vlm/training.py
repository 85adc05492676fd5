from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from tqdm import tqdm

from sifbench.errors import CapacityError, OptimizationDiverged, ParameterError
from sifbench.utils.console import debug, progress_disabled
from sifbench.vlm.model import DTYPE, ModelConfig, ModelParams, run_batch
from sifbench.vlm.tokenizer import END_ID, PAD_ID

IGNORE_INDEX = -100


@dataclass(frozen=True)
class TrainingSample:
    image: torch.Tensor
    prompt: list[int]
    caption: list[int]


def collate(samples: Sequence[TrainingSample], config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into (images, inputs, targets); targets ignore prompt[0] and padding."""
    sequences = [list(s.prompt) + list(s.caption) + [END_ID] for s in samples]
    width = max(len(seq) - 1 for seq in sequences)
    if width > config.text_capacity:
        raise CapacityError(f"Training sequence of {width} tokens exceeds text capacity {config.text_capacity}.")
    inputs = torch.full((len(samples), width), PAD_ID, dtype=torch.long)
    targets = torch.full((len(samples), width), IGNORE_INDEX, dtype=torch.long)
    for row, seq in enumerate(sequences):
        inputs[row, : len(seq) - 1] = torch.as_tensor(seq[:-1])
        targets[row, : len(seq) - 1] = torch.as_tensor(seq[1:])
    images = torch.stack([s.image.to(DTYPE) for s in samples])
    return images, inputs, targets


def sequence_loss(
    weights: Mapping[str, torch.Tensor],
    config: ModelConfig,
    samples: Sequence[TrainingSample],
) -> torch.Tensor:
    images, inputs, targets = collate(samples, config)
    _, logits = run_batch(weights, config, images, inputs)
    return F.cross_entropy(
        logits.reshape(-1, config.vocab_size), targets.reshape(-1), ignore_index=IGNORE_INDEX
    )


def lr_factor(schedule: str, steps: int, warmup: int = 0) -> Callable[[int], float]:
    """Multiplier on the base learning rate at each step."""
    if schedule == "constant":
        return lambda step: 1.0
    if schedule != "cosine":
        raise ParameterError(f"Unknown schedule {schedule!r}.")
    warmup = min(warmup, steps)

    def _cosine(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return _cosine


def train_next_token(
    params: ModelParams,
    batch_fn: Callable[[int], Sequence[TrainingSample]],
    *,
    steps: int,
    lr: float,
    optimizer: str = "sgd",
    schedule: str = "constant",
    warmup: int = 0,
    clip_norm: float | None = 1.0,
    desc: str = "Training",
) -> tuple[ModelParams, list[float]]:
    """Next-token training on batches from ``batch_fn(step)``; returns new params and per-step losses.

    ``schedule="cosine"`` ramps linearly over ``warmup`` steps and then decays to zero.
    """
    if steps < 0 or lr < 0 or not math.isfinite(lr):
        raise ParameterError("steps and lr must be nonnegative.")
    if warmup < 0:
        raise ParameterError("warmup must be nonnegative.")
    if steps == 0 or lr == 0:
        return params, []
    config = params.config
    leaves = {name: t.detach().clone().requires_grad_(True) for name, t in params.tensors.items()}
    if optimizer == "sgd":
        opt: torch.optim.Optimizer = torch.optim.SGD(leaves.values(), lr=lr)
    elif optimizer == "adamw":
        opt = torch.optim.AdamW(leaves.values(), lr=lr, weight_decay=0.0)
    else:
        raise ParameterError(f"Unknown optimizer {optimizer!r}.")
    scheduler = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor(schedule, steps, warmup))

    history: list[float] = []
    for step in tqdm(range(steps), desc=desc, disable=progress_disabled(), leave=False):
        loss = sequence_loss(leaves, config, batch_fn(step))
        if not torch.isfinite(loss):
            raise OptimizationDiverged(f"{desc}: loss became non-finite at step {step}.")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(leaves.values(), clip_norm)
        opt.step()
        scheduler.step()
        history.append(float(loss.detach()))
        if step % 50 == 0:
            debug(f"{desc} step {step}: loss={history[-1]:.4f}")
    return ModelParams(config, {name: t.detach().clone() for name, t in leaves.items()}), history
