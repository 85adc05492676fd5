"""Seeded synthetic scenes: Pillow-drawn shapes with byte-level captions.

A caption's content is a fixed function of the scene. Wording varies only at
a handful of synonym slots whose first option is the clear majority, so
independently trained models agree on their greedy caption while a logit
bias can still tip individual slots.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from sifbench.errors import ParameterError
from sifbench.utils.console import info
from sifbench.utils.rng import derive_seed
from sifbench.vlm.model import DTYPE, ModelConfig, ModelParams, init_model
from sifbench.vlm.tokenizer import encode
from sifbench.vlm.training import TrainingSample, train_next_token

CAPTION_MIN = 80
CAPTION_MAX = 110
PROCEDURE = "shapes-v2"

COLORS = {
    "red": (220, 40, 40),
    "blue": (40, 70, 220),
    "green": (40, 170, 70),
    "yellow": (235, 210, 50),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
}
SHAPES = ("square", "bar", "pillar")
SIZES = ("small", "large")
POSITIONS = ("top left", "top right", "bottom left", "bottom right", "center")

# Synonym slots, majority option first.
SYNONYMS: dict[str, tuple[str, ...]] = {
    "art": ("a", "one"),
    "small": ("small", "little", "tiny"),
    "large": ("large", "big", "huge"),
    "square": ("square", "block", "tile"),
    "bar": ("bar", "strip", "line"),
    "pillar": ("pillar", "column", "tower"),
    "verb": ("sits", "rests", "lies"),
    "prep": ("near", "at", "by"),
    "frame": ("picture", "image", "frame"),
    "bgword": ("background", "backdrop", "ground"),
    "looks": ("looks", "seems", "feels"),
    "calm": ("calm", "plain", "quiet"),
}
SLOT_WEIGHTS = {2: (0.7, 0.3), 3: (0.6, 0.25, 0.15)}

PROMPTS = (
    "describe the image in detail.",
    "what is shown in this picture?",
    "tell me about this image.",
    "describe the scene.",
    "what do you see here?",
)


@dataclass(frozen=True)
class Scene:
    shape: str
    color: str
    background: str
    size: str
    position: str


@dataclass(frozen=True)
class CorpusSample:
    scene: Scene
    image: torch.Tensor
    prompt: str
    caption: str

    def training_sample(self) -> TrainingSample:
        return TrainingSample(self.image, encode(self.prompt), encode(self.caption))


def _rng(seed: int, label: str, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label, index))


def sample_scene(rng: np.random.Generator) -> Scene:
    names = list(COLORS)
    color = names[int(rng.integers(len(names)))]
    background = names[int(rng.integers(len(names)))]
    while background == color:
        background = names[int(rng.integers(len(names)))]
    return Scene(
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        color=color,
        background=background,
        size=SIZES[int(rng.integers(len(SIZES)))],
        position=POSITIONS[int(rng.integers(len(POSITIONS)))],
    )


def _extent(size: str, image_size: int) -> int:
    return (image_size * 3) // 8 if size == "small" else (image_size * 5) // 8


def _anchor(position: str, image_size: int) -> tuple[int, int]:
    quarter = (image_size * 5) // 16
    three_quarter = image_size - quarter
    return {
        "top left": (quarter, quarter),
        "top right": (three_quarter, quarter),
        "bottom left": (quarter, three_quarter),
        "bottom right": (three_quarter, three_quarter),
        "center": (image_size // 2, image_size // 2),
    }[position]


def render_scene(scene: Scene, image_size: int = 32) -> torch.Tensor:
    """Draw ``scene`` and return a (3, H, W) float64 tensor in [0, 1]."""
    canvas = Image.new("RGB", (image_size, image_size), COLORS[scene.background])
    draw = ImageDraw.Draw(canvas)
    extent = _extent(scene.size, image_size)
    cx, cy = _anchor(scene.position, image_size)
    half, thin = extent // 2, max(1, extent // 3) // 2
    left, top, right, bottom = cx - half, cy - half, cx + half, cy + half
    if scene.shape == "bar":
        top, bottom = cy - thin, cy + thin
    elif scene.shape == "pillar":
        left, right = cx - thin, cx + thin
    draw.rectangle([left, top, right, bottom], fill=COLORS[scene.color])
    return image_to_tensor(canvas)


def image_to_tensor(image: Image.Image) -> torch.Tensor:
    array = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).to(DTYPE)


def load_image(path: Path, image_size: int = 32) -> torch.Tensor:
    with Image.open(path) as handle:
        resized = handle.convert("RGB").resize((image_size, image_size), Image.Resampling.BILINEAR)
        return image_to_tensor(resized)


def _pick(slot: str, rng: np.random.Generator | None) -> str:
    options = SYNONYMS[slot]
    if rng is None:
        return options[0]
    return options[int(rng.choice(len(options), p=SLOT_WEIGHTS[len(options)]))]


def caption_scene(scene: Scene, rng: np.random.Generator | None = None) -> str:
    """Caption for ``scene``; without ``rng`` every slot takes its majority word."""
    words = {slot: _pick(slot, rng) for slot in ("art", "verb", "prep", "frame", "bgword", "looks", "calm")}
    size, shape = _pick(scene.size, rng), _pick(scene.shape, rng)
    text = (
        f"{words['art']} {size} {scene.color} {shape} {words['verb']} {words['prep']} "
        f"the {scene.position} of the {words['frame']}. the {words['bgword']} is {scene.background}. "
        f"it {words['looks']} {words['calm']}."
    )
    assert CAPTION_MIN <= len(text) <= CAPTION_MAX, text
    return text


def make_sample(seed: int, index: int, image_size: int = 32, *, stream: str = "corpus") -> CorpusSample:
    rng = _rng(seed, stream, index)
    scene = sample_scene(rng)
    prompt = PROMPTS[int(rng.integers(len(PROMPTS)))]
    return CorpusSample(scene, render_scene(scene, image_size), prompt, caption_scene(scene, rng))


def gibberish_prompt(seed: int, index: int, length: int = 24) -> list[int]:
    """High-perplexity prompt: bytes the caption corpus never uses."""
    rng = _rng(seed, "gibberish", index)
    raw = rng.integers(128, 256, size=length)
    return encode(bytes(int(b) for b in raw))


@lru_cache(maxsize=1)
def default_stopwords(count: int = 32, samples: int = 512) -> frozenset[int]:
    """The ``count`` most frequent caption tokens over a fixed sample of the generator."""
    counts: Counter[int] = Counter()
    for index in range(samples):
        rng = _rng(0, "corpus", index)
        counts.update(encode(caption_scene(sample_scene(rng), rng)))
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return frozenset(tok for tok, _ in ranked[:count])


@dataclass(frozen=True)
class SyntheticTask:
    """Reproducible image/caption corpus used for pretraining and fine-tuning."""

    dataset_seed: int
    samples: int = 256
    procedure: str = PROCEDURE

    def __post_init__(self) -> None:
        if self.procedure != PROCEDURE:
            raise ParameterError(f"Unknown corpus procedure {self.procedure!r}.")
        if self.samples < 1:
            raise ParameterError("A synthetic task needs at least one sample.")

    def sample(self, index: int, image_size: int = 32) -> CorpusSample:
        return make_sample(self.dataset_seed, index % self.samples, image_size)

    def batch_fn(self, batch_size: int, config: ModelConfig):
        def _batch(step: int) -> list[TrainingSample]:
            start = step * batch_size
            return [self.sample(start + j, config.image_size).training_sample() for j in range(batch_size)]

        return _batch

    def to_dict(self) -> dict[str, object]:
        return {"dataset_seed": self.dataset_seed, "procedure": self.procedure, "samples": self.samples}


PRETRAIN_STEPS = 2400
PRETRAIN_LR = 3e-3
PRETRAIN_BATCH = 16
PRETRAIN_SAMPLES = 65536


def pretrain_model(
    seed: int,
    config: ModelConfig | None = None,
    *,
    steps: int = PRETRAIN_STEPS,
    lr: float = PRETRAIN_LR,
    batch_size: int = PRETRAIN_BATCH,
    samples: int = PRETRAIN_SAMPLES,
) -> ModelParams:
    """Seeded init followed by AdamW next-token training on this seed's caption corpus.

    The learning rate warms up over the first tenth of training and then follows a cosine decay.
    """
    params = init_model(seed, config)
    task = SyntheticTask(seed, samples)
    params, history = train_next_token(
        params,
        task.batch_fn(batch_size, params.config),
        steps=steps,
        lr=lr,
        optimizer="adamw",
        schedule="cosine",
        warmup=steps // 10,
        desc=f"Pretraining seed {seed}",
    )
    if history:
        info(f"Pretrained seed {seed}: loss {history[0]:.3f} -> {history[-1]:.3f}")
    return params
