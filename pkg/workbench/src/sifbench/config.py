from __future__ import annotations

from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from sifbench.pipeline.validation import validate_document
from sifbench.schemas import MANIFEST_SCHEMA
from sifbench.utils.hashing import manifest_hash


DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "outputs/run",
    "model": {
        "config": {
            "image_size": 32,
            "channels": 3,
            "patch_size": 8,
            "vocab_size": 512,
            "embed_dim": 32,
            "layers": 2,
            "heads": 2,
            "max_seq_len": 160,
        },
        "pretrain_steps": 2400,
        "pretrain_lr": 0.003,
        "batch_size": 16,
        "corpus_samples": 65536,
        "checkpoint": None,
    },
    "unrelated": {
        "count": 3,
        "seed_offset": 100,
        "checkpoints": [],
    },
    "heldout": {
        "seed_offset": 1000,
    },
    "key": {
        "path": None,
    },
    "watermark": {
        "gamma": 0.5,
        "delta": 4.0,
    },
    "decode": {
        "mode": "greedy",
        "temperature": 1.0,
        "top_p": 1.0,
        "seed": 0,
        "max_len": 112,
    },
    "distill": {
        "epsilon": 16 / 255,
        "alpha": 1 / 255,
        "steps": 1000,
        "top_k": 50,
        "lambda_wm": 0.5,
        "lambda_ce": 0.5,
        "seed": 0,
        "record_every": 50,
    },
    "rfo": {
        "rho": 0.5,
    },
    "triggers": {
        "count": 20,
        "max_attempts": 200,
        "min_teacher_gain": 1.0,
        "prompts": [],
    },
    "mutations": [
        {"kind": "quantize", "params": {"bits": 8}},
        {"kind": "quantize", "params": {"bits": 4}},
        {"kind": "prune", "params": {"fraction": 0.2, "scope": "both"}},
        {"kind": "weight_noise", "params": {"sigma": 0.002, "scope": "both"}},
        {"kind": "finetune", "params": {"steps": 200, "lr": 0.05}},
        {"kind": "image_noise", "params": {"noise": "uniform", "magnitude": 0.02}},
        {"kind": "resize", "params": {"size": 24}},
    ],
    "sda": {
        "ppl_threshold": 1000.0,
        "jaccard_threshold": 0.1,
        "sem_threshold": 0.0,
        "normal_queries": 40,
        "gibberish_queries": 10,
        "phrase": "OWNER FINGERPRINT MARK PHRASE",
    },
    "runtime": {
        "concurrency": 4,
    },
}


@dataclass
class ResolvedConfig:
    data: dict[str, Any]
    source_path: Path | None

    @property
    def manifest_hash(self) -> str:
        return manifest_hash(self.data)

    def resolve_path(self, value: str | Path | None) -> Path | None:
        """Relative manifest paths are taken relative to the manifest file."""
        if value is None:
            return None
        path = Path(value).expanduser()
        if path.is_absolute() or self.source_path is None:
            return path
        return self.source_path.parent / path


def load_config(path: Path) -> ResolvedConfig:
    path = path.expanduser().resolve()
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        user_cfg = yaml.safe_load(handle) or {}
    if not isinstance(user_cfg, dict):
        raise ValueError(f"Manifest {path} must hold a mapping at the top level.")
    merged = _deep_merge(DEFAULT_CONFIG, user_cfg)
    validate_document(merged, MANIFEST_SCHEMA, str(path))
    return ResolvedConfig(data=merged, source_path=path)


def resolve_config(overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Resolve a config dict by applying overrides to defaults."""
    base = deepcopy(DEFAULT_CONFIG)
    if overrides:
        merged = _deep_merge(base, overrides)
        validate_document(merged, MANIFEST_SCHEMA, "overrides")
        return merged
    return base


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    result: dict[str, Any] = {}
    for key in base.keys() | override.keys():
        if key in base and key in override:
            if isinstance(base[key], dict) and isinstance(override[key], dict):
                result[key] = _deep_merge(base[key], override[key])
            else:
                result[key] = deepcopy(override[key])
        elif key in base:
            result[key] = deepcopy(base[key])
        else:
            result[key] = deepcopy(override[key])
    return result
