"""Directional desk-scale experiments. Each returns a plain dict report."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
import torch

from sifbench.errors import ParameterError
from sifbench.pipeline.corpus import PRETRAIN_STEPS, gibberish_prompt, make_sample, pretrain_model
from sifbench.pipeline.mutate import MutationSpec, apply_mutation
from sifbench.pipeline.rfo import RfoConfig, rfo_distill
from sifbench.pipeline.safd import (
    MIN_RESPONSE_TOKENS,
    DistillConfig,
    TriggerArtifact,
    TriggerSpec,
    build_trigger_specs,
    distill,
)
from sifbench.pipeline.sda import FixedPhraseResponder, SdaConfig, false_positive_rate
from sifbench.pipeline.verify import ThresholdTable, calibrate_thresholds, fmr
from sifbench.utils.console import debug, info, warn
from sifbench.utils.parallel import map_concurrently
from sifbench.utils.rng import generator
from sifbench.vlm.decoding import DecodeConfig
from sifbench.vlm.model import ModelConfig, ModelParams, init_model
from sifbench.vlm.tokenizer import BYTE_OFFSET, encode
from sifbench.wmark import WatermarkKey, WatermarkParams, detect, watermarked_decode


def _stats(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan")}
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0}


def null_z_statistics(
    sequences: int = 10_000,
    length: int = 200,
    gamma: float = 0.5,
    *,
    vocab_size: int = 20_000,
    seed: int = 0,
) -> dict[str, Any]:
    """z-scores of key-independent uniform token sequences; should look standard normal."""
    key = WatermarkKey.generate(seed)
    wparams = WatermarkParams(gamma=gamma, delta=0.0)
    # END and PAD are excluded so every sequence keeps its full length.
    tokens = torch.randint(BYTE_OFFSET, vocab_size, (sequences, length), generator=generator(seed, "null-sequences"))
    zs = [detect(row, key, wparams, vocab_size).z_score for row in tokens.tolist()]
    return {"gamma": gamma, "length": length, "sequences": sequences, **_stats(zs)}


def watermark_signal_rate(
    models: int = 100,
    wparams: WatermarkParams | None = None,
    *,
    config: ModelConfig | None = None,
    z_threshold: float = 2.0,
    seed: int = 0,
    concurrency: int = 1,
) -> dict[str, Any]:
    """Share of seeded models whose watermarked response (>= 80 tokens) detects above ``z_threshold``."""
    wparams = wparams or WatermarkParams(gamma=0.5, delta=4.0)
    key = WatermarkKey.generate(seed)

    def _one(index: int) -> float | None:
        params = init_model(seed + index, config)
        sample = make_sample(seed, index, params.config.image_size, stream="signal")
        response = watermarked_decode(params, sample.image, encode(sample.prompt), key, wparams)
        if len(response) < MIN_RESPONSE_TOKENS:
            return None
        return detect(response, key, wparams, params.config.vocab_size).z_score

    zs = map_concurrently(_one, list(range(models)), limit=concurrency, progress_desc="Signal")
    scored = [z for z in zs if z is not None]
    above = sum(z > z_threshold for z in scored)
    return {
        "models": models,
        "scored": len(scored),
        "rate": above / len(scored) if scored else 0.0,
        "z_threshold": z_threshold,
        **_stats(scored),
    }


def _improved(artifacts: Sequence[TriggerArtifact]) -> float:
    hits = sum(1 for a in artifacts if a.initial_z is not None and a.final_z is not None and a.final_z > a.initial_z)
    return hits / len(artifacts) if artifacts else 0.0


def budget_ablation(
    params: ModelParams,
    specs: Sequence[TriggerSpec],
    epsilons: Sequence[float],
    cfg: DistillConfig,
    key: WatermarkKey,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None = None,
) -> dict[str, Any]:
    """Forge at increasing budgets, warm-starting each budget from the previous trigger."""
    if list(epsilons) != sorted(epsilons):
        raise ParameterError("Budgets must be increasing for warm starts.")
    rows = []
    starts: dict[str, Any] = {}
    for eps in epsilons:
        step_cfg = replace(cfg, epsilon=float(eps), alpha=min(cfg.alpha, float(eps)))
        artifacts = []
        for spec in specs:
            artifact = distill(params, spec, step_cfg, key, wparams, decode_cfg=decode_cfg, start=starts.get(spec.trigger_id))
            starts[spec.trigger_id] = artifact.trigger_image
            artifacts.append(artifact)
        final_z = [a.final_z for a in artifacts if a.final_z is not None]
        rows.append(
            {
                "epsilon": float(eps),
                "improved_rate": _improved(artifacts),
                "mean_final_total": float(np.mean([a.final_losses["total"] for a in artifacts])),
                "mean_final_z": float(np.mean(final_z)) if final_z else None,
            }
        )
        info(f"Budget {eps:.4f}: improved {rows[-1]['improved_rate']:.2f}")
    return {"rows": rows}


def step_ablation(artifacts: Sequence[TriggerArtifact]) -> dict[str, Any]:
    """Mean loss terms at every recorded step across triggers."""
    by_step: dict[int, list[dict[str, float]]] = {}
    for artifact in artifacts:
        for entry in artifact.history:
            by_step.setdefault(int(entry["step"]), []).append(entry)
    rows = []
    for step in sorted(by_step):
        entries = by_step[step]
        rows.append(
            {"step": step, **{term: float(np.mean([e[term] for e in entries])) for term in ("total", "wm", "ce")}}
        )
    return {"rows": rows, "triggers": len(artifacts)}


@dataclass
class Testbed:
    """An owner model, its unrelated calibration models, trigger specs and a key."""

    owner: ModelParams
    unrelated: list[ModelParams]
    heldout: ModelParams
    specs: list[TriggerSpec]
    key: WatermarkKey


def build_testbed(
    seed: int,
    config: ModelConfig | None = None,
    *,
    unrelated_count: int = 3,
    trigger_count: int = 20,
    pretrain_steps: int = PRETRAIN_STEPS,
    min_teacher_gain: float | None = 1.0,
    wparams: WatermarkParams | None = None,
    decode_cfg: DecodeConfig | None = None,
    concurrency: int = 1,
) -> Testbed:
    wparams = wparams or WatermarkParams()
    seeds = [seed] + [seed + 100 + i for i in range(unrelated_count)] + [seed + 1000]
    models = map_concurrently(
        lambda s: pretrain_model(s, config, steps=pretrain_steps), seeds, limit=concurrency, progress_desc="Testbed"
    )
    key = WatermarkKey.generate(seed)
    max_len = (decode_cfg or DecodeConfig()).max_len
    specs = build_trigger_specs(
        models[0],
        key,
        wparams,
        count=trigger_count,
        seed=seed,
        max_attempts=max(200, 10 * trigger_count),
        max_len=max_len,
        min_teacher_gain=min_teacher_gain,
    )
    return Testbed(models[0], list(models[1:-1]), models[-1], specs, key)


def forge_and_calibrate(
    bed: Testbed,
    cfg: DistillConfig,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None = None,
    *,
    rho: float | None = None,
    concurrency: int = 1,
) -> tuple[list[TriggerArtifact], ThresholdTable]:
    if rho is None:
        forge = lambda spec: distill(bed.owner, spec, cfg, bed.key, wparams, decode_cfg=decode_cfg)  # noqa: E731
    else:
        rfo_cfg = RfoConfig(**cfg.to_dict(), rho=rho)
        forge = lambda spec: rfo_distill(bed.owner, spec, rfo_cfg, bed.key, wparams, decode_cfg=decode_cfg)  # noqa: E731
    artifacts = map_concurrently(forge, bed.specs, limit=concurrency, progress_desc="Forging")
    table = calibrate_thresholds(artifacts, bed.unrelated, bed.key, wparams, decode_cfg, concurrency=concurrency)
    return table.apply(artifacts), table


def _fmr_under(
    bed: Testbed,
    artifacts: Sequence[TriggerArtifact],
    table: ThresholdTable,
    mutation: MutationSpec,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None,
    concurrency: int,
) -> float:
    suspect = apply_mutation(bed.owner, mutation)
    return fmr(
        suspect, artifacts, table, bed.key, wparams, decode_cfg, image_mutation=mutation, concurrency=concurrency
    ).fmr


NOISE_SIGMAS = (0.002, 0.005, 0.01, 0.02, 0.05, 0.1)
FMR_BAND = (0.2, 0.8)


def choose_sigma(rows: Sequence[Mapping[str, float]], band: tuple[float, float] = FMR_BAND) -> float:
    """Smallest sigma whose FMR lies strictly inside ``band``; otherwise the one nearest its middle."""
    if not rows:
        raise ParameterError("The noise pilot produced no rows.")
    lo, hi = band
    ordered = sorted(rows, key=lambda row: row["sigma"])
    for row in ordered:
        if lo < row["fmr"] < hi:
            return float(row["sigma"])
    middle = (lo + hi) / 2
    best = min(ordered, key=lambda row: abs(row["fmr"] - middle))
    warn(f"No noise level put the FMR inside {band}; using sigma={best['sigma']} (FMR {best['fmr']:.2f}).")
    return float(best["sigma"])


def pilot_noise_sigma(
    bed: Testbed,
    artifacts: Sequence[TriggerArtifact],
    table: ThresholdTable,
    wparams: WatermarkParams,
    *,
    sigmas: Sequence[float] = NOISE_SIGMAS,
    scope: str = "both",
    band: tuple[float, float] = FMR_BAND,
    decode_cfg: DecodeConfig | None = None,
    concurrency: int = 1,
) -> dict[str, Any]:
    """Sweep weight-noise levels on plain triggers and pick one that leaves the FMR informative."""
    rows = []
    for sigma in sigmas:
        spec = MutationSpec("weight_noise", {"sigma": float(sigma), "scope": scope})
        rate = _fmr_under(bed, artifacts, table, spec, wparams, decode_cfg, concurrency)
        rows.append({"sigma": float(sigma), "fmr": rate})
        debug(f"Noise pilot sigma={sigma}: FMR {rows[-1]['fmr']:.2f}")
    sigma = choose_sigma(rows, band)
    info(f"Noise pilot picked sigma={sigma}")
    return {"band": list(band), "rows": rows, "scope": scope, "sigma": sigma}


def _pilot_noise(
    bed: Testbed,
    plain: tuple[list[TriggerArtifact], ThresholdTable],
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None,
    concurrency: int,
) -> tuple[MutationSpec, dict[str, Any]]:
    pilot = pilot_noise_sigma(bed, *plain, wparams, decode_cfg=decode_cfg, concurrency=concurrency)
    return MutationSpec("weight_noise", {"sigma": pilot["sigma"], "scope": pilot["scope"]}), pilot


def rfo_benefit(
    beds: Sequence[Testbed],
    cfg: DistillConfig,
    wparams: WatermarkParams,
    *,
    rho: float = 0.5,
    noise: MutationSpec | None = None,
    decode_cfg: DecodeConfig | None = None,
    concurrency: int = 1,
) -> dict[str, Any]:
    """Paired FMR under scoped weight noise, with and without worst-case activation shifts.

    Without an explicit ``noise`` the level comes from a pilot sweep on the first bed's plain triggers.
    """
    if not beds:
        raise ParameterError("rfo_benefit needs at least one testbed.")
    plain_runs = [forge_and_calibrate(bed, cfg, wparams, decode_cfg, concurrency=concurrency) for bed in beds]
    pilot = None
    if noise is None:
        noise, pilot = _pilot_noise(beds[0], plain_runs[0], wparams, decode_cfg, concurrency)
    rows = []
    for index, (bed, (plain, plain_table)) in enumerate(zip(beds, plain_runs)):
        robust, robust_table = forge_and_calibrate(bed, cfg, wparams, decode_cfg, rho=rho, concurrency=concurrency)
        without = _fmr_under(bed, plain, plain_table, noise, wparams, decode_cfg, concurrency)
        with_rfo = _fmr_under(bed, robust, robust_table, noise, wparams, decode_cfg, concurrency)
        rows.append({"bed": index, "fmr_rfo": with_rfo, "fmr_safd": without, "difference": with_rfo - without})
    mean_diff = float(np.mean([r["difference"] for r in rows]))
    return {
        "mean_difference": mean_diff,
        "mean_fmr_rfo": float(np.mean([r["fmr_rfo"] for r in rows])),
        "mean_fmr_safd": float(np.mean([r["fmr_safd"] for r in rows])),
        "mutation": noise.label(),
        "pilot": pilot,
        "rho": rho,
        "rows": rows,
        "sign": int(np.sign(mean_diff)),
    }


def rho_sweep(
    beds: Sequence[Testbed],
    cfg: DistillConfig,
    wparams: WatermarkParams,
    *,
    rhos: Sequence[float] = (0.0, 0.1, 0.5, 1.0),
    noise: MutationSpec | None = None,
    decode_cfg: DecodeConfig | None = None,
    concurrency: int = 1,
) -> dict[str, Any]:
    """Mean FMR under weight noise for triggers forged at each perturbation radius."""
    if not beds or not rhos:
        raise ParameterError("rho_sweep needs testbeds and at least one radius.")
    if any(rho < 0 for rho in rhos):
        raise ParameterError("Perturbation radii must be nonnegative.")
    runs = {}
    for rho in rhos:
        radius = None if rho == 0 else float(rho)
        runs[float(rho)] = [
            forge_and_calibrate(bed, cfg, wparams, decode_cfg, rho=radius, concurrency=concurrency) for bed in beds
        ]
    pilot = None
    if noise is None:
        if 0.0 in runs:
            plain = runs[0.0][0]
        else:
            plain = forge_and_calibrate(beds[0], cfg, wparams, decode_cfg, concurrency=concurrency)
        noise, pilot = _pilot_noise(beds[0], plain, wparams, decode_cfg, concurrency)
    rows = []
    for rho, bed_runs in runs.items():
        fmrs = [
            _fmr_under(bed, artifacts, table, noise, wparams, decode_cfg, concurrency)
            for bed, (artifacts, table) in zip(beds, bed_runs)
        ]
        rows.append({"rho": rho, "fmr": fmrs, "mean_fmr": float(np.mean(fmrs))})
        info(f"rho={rho}: mean FMR {rows[-1]['mean_fmr']:.2f}")
    return {"mutation": noise.label(), "pilot": pilot, "rows": rows}


SAMPLING_GRID = (
    (0.1, 1.0),
    (0.3, 1.0),
    (0.5, 1.0),
    (0.7, 1.0),
    (1.0, 1.0),
    (0.5, 0.9),
    (0.7, 0.9),
    (1.0, 0.9),
    (0.7, 0.5),
    (1.0, 0.5),
)


def sampling_robustness(
    bed: Testbed,
    artifacts: Sequence[TriggerArtifact],
    table: ThresholdTable,
    wparams: WatermarkParams,
    *,
    grid: Sequence[tuple[float, float]] = SAMPLING_GRID,
    seed: int = 0,
    max_len: int = 112,
    concurrency: int = 1,
) -> dict[str, Any]:
    """Owner and held-out FMR when the suspect answers by sampling instead of greedy decoding.

    Thresholds stay the greedy ones in ``table``; every trigger query gets its own fixed seed.
    """
    rows = []
    for temperature, top_p in grid:
        decode_cfg = DecodeConfig("sample", temperature=temperature, top_p=top_p, seed=seed, max_len=max_len)
        owner = fmr(bed.owner, artifacts, table, bed.key, wparams, decode_cfg, concurrency=concurrency).fmr
        heldout = fmr(bed.heldout, artifacts, table, bed.key, wparams, decode_cfg, concurrency=concurrency).fmr
        rows.append({"temperature": temperature, "top_p": top_p, "owner_fmr": owner, "heldout_fmr": heldout})
        info(f"Sampling T={temperature} top_p={top_p}: owner FMR {owner:.2f}, held-out FMR {heldout:.2f}")
    return {
        "mean_owner_fmr": float(np.mean([r["owner_fmr"] for r in rows])) if rows else 0.0,
        "rows": rows,
        "triggers": len(artifacts),
    }


def quantization_ordering(
    beds: Sequence[Testbed],
    cfg: DistillConfig,
    wparams: WatermarkParams,
    *,
    decode_cfg: DecodeConfig | None = None,
    concurrency: int = 1,
) -> dict[str, Any]:
    rows = []
    for index, bed in enumerate(beds):
        artifacts, table = forge_and_calibrate(bed, cfg, wparams, decode_cfg, concurrency=concurrency)
        row = {"bed": index}
        for bits in (8, 4):
            spec = MutationSpec("quantize", {"bits": bits})
            row[f"fmr_{bits}bit"] = _fmr_under(bed, artifacts, table, spec, wparams, decode_cfg, concurrency)
        rows.append(row)
    mean8 = float(np.mean([r["fmr_8bit"] for r in rows])) if rows else 0.0
    mean4 = float(np.mean([r["fmr_4bit"] for r in rows])) if rows else 0.0
    return {"mean_fmr_4bit": mean4, "mean_fmr_8bit": mean8, "ordered": mean8 >= mean4, "rows": rows}


def sda_separation(
    stolen: ModelParams,
    reference: ModelParams,
    triggers: Sequence[TriggerArtifact],
    cfg: SdaConfig,
    *,
    normal_queries: int = 40,
    gibberish_queries: int = 10,
    phrase: str | None = None,
    seed: int = 0,
    decode_cfg: DecodeConfig | None = None,
    concurrency: int = 1,
) -> dict[str, Any]:
    """Flag rates for fixed-phrase triggers, distilled triggers, normal and gibberish queries."""
    size = stolen.config.image_size
    trigger_queries = [(t.trigger_image, list(t.spec.prompt)) for t in triggers]
    normal = []
    for i in range(normal_queries):
        sample = make_sample(seed, i, size, stream="queries")
        normal.append((sample.image, encode(sample.prompt)))
    gibberish = [
        (make_sample(seed, i, size, stream="gibberish-images").image, gibberish_prompt(seed, i))
        for i in range(gibberish_queries)
    ]
    phrase_model = FixedPhraseResponder.for_images(stolen, [t.trigger_image for t in triggers], phrase)

    def _rate(model, queries) -> float | None:
        if not queries:
            return None
        return false_positive_rate(model, reference, queries, cfg, decode_cfg, concurrency=concurrency)

    return {
        "fixed_phrase_flag_rate": _rate(phrase_model, trigger_queries),
        "gibberish_flag_rate": _rate(stolen, gibberish),
        "normal_false_positive_rate": _rate(stolen, normal),
        "safd_flag_rate": _rate(stolen, trigger_queries),
        "sda_config": cfg.to_dict(),
    }


def heldout_reliability(
    bed: Testbed,
    artifacts: Sequence[TriggerArtifact],
    table: ThresholdTable,
    wparams: WatermarkParams,
    *,
    decode_cfg: DecodeConfig | None = None,
    concurrency: int = 1,
) -> dict[str, Any]:
    """FMR of each calibration model against its own table (always 0), of a held-out seed and of the owner."""
    calibration = [
        fmr(model, artifacts, table, bed.key, wparams, decode_cfg, concurrency=concurrency).fmr
        for model in bed.unrelated
    ]
    heldout = fmr(bed.heldout, artifacts, table, bed.key, wparams, decode_cfg, concurrency=concurrency).fmr
    owner = fmr(bed.owner, artifacts, table, bed.key, wparams, decode_cfg, concurrency=concurrency).fmr
    return {"calibration_fmr": calibration, "heldout_fmr": heldout, "owner_fmr": owner, "triggers": len(artifacts)}
