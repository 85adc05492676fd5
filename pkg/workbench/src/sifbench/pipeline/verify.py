"""Per-trigger thresholds from unrelated models, matching rate, robustness sweeps."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from sifbench.errors import ConsistencyError, ParameterError
from sifbench.pipeline.mutate import IDENTITY, MutationSpec, apply_mutation, apply_to_image
from sifbench.pipeline.safd import TriggerArtifact
from sifbench.utils.console import info, warn
from sifbench.utils.parallel import map_concurrently
from sifbench.utils.rng import derive_seed
from sifbench.vlm.checkpoint import params_digest
from sifbench.vlm.decoding import DecodeConfig, decode
from sifbench.vlm.model import ModelParams
from sifbench.wmark import WatermarkKey, WatermarkParams, detect

MIN_SCORED_TOKENS = 2


def _tau_out(tau: float) -> float | None:
    return tau if math.isfinite(tau) else None


def _tau_in(value: float | None) -> float:
    return math.inf if value is None else float(value)


@dataclass(frozen=True)
class ThresholdEntry:
    trigger_id: str
    tau: float
    calibration_z: list[float | None]

    def to_dict(self) -> dict[str, Any]:
        return {"calibration_z": list(self.calibration_z), "tau": _tau_out(self.tau), "trigger_id": self.trigger_id}


@dataclass(frozen=True)
class ThresholdTable:
    entries: Mapping[str, ThresholdEntry]
    key_digest: str
    models: list[str] = field(default_factory=list)
    decode_config: dict[str, Any] = field(default_factory=dict)

    def tau(self, trigger_id: str) -> float:
        if trigger_id not in self.entries:
            raise ConsistencyError(f"Threshold table has no entry for trigger {trigger_id}.")
        return self.entries[trigger_id].tau

    def apply(self, triggers: Sequence[TriggerArtifact]) -> list[TriggerArtifact]:
        return [t.with_threshold(_tau_out(self.tau(t.trigger_id))) for t in triggers]

    def to_dict(self) -> dict[str, Any]:
        return {
            "decode_config": dict(self.decode_config),
            "entries": [self.entries[k].to_dict() for k in sorted(self.entries)],
            "key_digest": self.key_digest,
            "models": list(self.models),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ThresholdTable":
        entries = {
            e["trigger_id"]: ThresholdEntry(e["trigger_id"], _tau_in(e.get("tau")), list(e.get("calibration_z", [])))
            for e in data.get("entries", [])
        }
        return cls(entries, str(data["key_digest"]), list(data.get("models", [])), dict(data.get("decode_config", {})))


@dataclass(frozen=True)
class FmrEntry:
    trigger_id: str
    z: float | None
    tau: float
    matched: bool
    token_count: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "matched": self.matched,
            "tau": _tau_out(self.tau),
            "token_count": self.token_count,
            "trigger_id": self.trigger_id,
            "z": self.z,
        }


@dataclass(frozen=True)
class FmrReport:
    entries: list[FmrEntry]
    fmr: float
    suspect_digest: str
    key_digest: str
    decode_config: dict[str, Any]
    mutation: str = "identity"

    @property
    def matched(self) -> int:
        return sum(e.matched for e in self.entries)

    def to_dict(self) -> dict[str, Any]:
        return {
            "decode_config": dict(self.decode_config),
            "entries": [e.to_dict() for e in self.entries],
            "fmr": self.fmr,
            "key_digest": self.key_digest,
            "matched": self.matched,
            "mutation": self.mutation,
            "suspect_digest": self.suspect_digest,
            "triggers": len(self.entries),
        }


@dataclass(frozen=True)
class SweepRow:
    mutation_id: str
    mutation: MutationSpec
    report: FmrReport

    def to_dict(self) -> dict[str, Any]:
        return {
            "mutation": self.mutation.to_dict(),
            "mutation_id": self.mutation_id,
            "label": self.mutation.label(),
            "report": self.report.to_dict(),
        }


def _score(
    params: ModelParams,
    trigger: TriggerArtifact,
    key: WatermarkKey,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None,
    image_mutation: MutationSpec,
) -> tuple[float | None, int]:
    image = apply_to_image(trigger.trigger_image, image_mutation)
    if decode_cfg is not None and decode_cfg.mode == "sample":
        # Each trigger query draws from its own fixed stream.
        decode_cfg = decode_cfg.with_seed(derive_seed(decode_cfg.seed, f"query:{trigger.trigger_id}"))
    response = decode(params, image, trigger.spec.prompt, decode_cfg)
    if len(response) < MIN_SCORED_TOKENS:
        return None, len(response)
    result = detect(response, key, wparams, params.config.vocab_size)
    return result.z_score, result.token_count


def threshold_from_scores(scores: Sequence[float | None]) -> float:
    """Largest recorded calibration z; excluded (None) scores do not count."""
    kept = [z for z in scores if z is not None]
    return max(kept) if kept else math.inf


def _check_key(triggers: Sequence[TriggerArtifact], key: WatermarkKey) -> None:
    digest = key.digest()
    for trigger in triggers:
        if trigger.spec.key_digest != digest:
            raise ConsistencyError(f"Trigger {trigger.trigger_id} was forged under a different key.")


def calibrate_thresholds(
    triggers: Sequence[TriggerArtifact],
    unrelated: Sequence[ModelParams],
    key: WatermarkKey,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None = None,
    *,
    concurrency: int = 1,
) -> ThresholdTable:
    if not triggers:
        raise ParameterError("Need at least one trigger to calibrate.")
    if not unrelated:
        raise ParameterError("Need at least one unrelated model to calibrate.")
    _check_key(triggers, key)
    cfg = decode_cfg or DecodeConfig()
    if len(unrelated) < 3:
        warn(f"Calibrating on {len(unrelated)} unrelated model(s); three or more are recommended.")

    def _column(model: ModelParams) -> list[float | None]:
        return [_score(model, t, key, wparams, cfg, IDENTITY)[0] for t in triggers]

    columns = map_concurrently(_column, list(unrelated), limit=concurrency, progress_desc="Calibrating")
    entries = {}
    for row, trigger in enumerate(triggers):
        scores = [column[row] for column in columns]
        kept = [z for z in scores if z is not None]
        if len(kept) < len(scores):
            warn(f"Trigger {trigger.trigger_id}: {len(scores) - len(kept)} unrelated response(s) too short; excluded.")
        entries[trigger.trigger_id] = ThresholdEntry(trigger.trigger_id, threshold_from_scores(scores), scores)
    info(f"[green]Calibrated {len(entries)} thresholds[/green] over {len(unrelated)} unrelated models.")
    return ThresholdTable(entries, key.digest(), [params_digest(m) for m in unrelated], cfg.to_dict())


def fmr(
    suspect: ModelParams,
    triggers: Sequence[TriggerArtifact],
    table: ThresholdTable,
    key: WatermarkKey,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None = None,
    *,
    image_mutation: MutationSpec = IDENTITY,
    concurrency: int = 1,
    suspect_digest: str | None = None,
) -> FmrReport:
    if not triggers:
        raise ParameterError("Need at least one trigger.")
    if table.key_digest != key.digest():
        raise ConsistencyError("Threshold table was calibrated under a different key.")
    _check_key(triggers, key)
    cfg = decode_cfg or DecodeConfig()
    taus = {t.trigger_id: table.tau(t.trigger_id) for t in triggers}
    scores = map_concurrently(
        lambda t: _score(suspect, t, key, wparams, cfg, image_mutation),
        list(triggers),
        limit=concurrency,
    )
    entries = []
    for trigger, (z, count) in zip(triggers, scores):
        tau = taus[trigger.trigger_id]
        entries.append(FmrEntry(trigger.trigger_id, z, tau, z is not None and z > tau, count))
    entries.sort(key=lambda e: e.trigger_id)
    matched = sum(e.matched for e in entries)
    return FmrReport(
        entries=entries,
        fmr=matched / len(entries),
        suspect_digest=suspect_digest or params_digest(suspect),
        key_digest=key.digest(),
        decode_config=cfg.to_dict(),
        mutation=image_mutation.label(),
    )


def robustness_sweep(
    base: ModelParams,
    triggers: Sequence[TriggerArtifact],
    table: ThresholdTable,
    mutations: Sequence[MutationSpec],
    key: WatermarkKey,
    wparams: WatermarkParams,
    decode_cfg: DecodeConfig | None = None,
    *,
    concurrency: int = 1,
) -> list[SweepRow]:
    """One FMR row per mutation, preceded by the unmodified baseline."""
    if not mutations:
        raise ParameterError("A sweep needs at least one mutation.")
    rows = []
    for idx, spec in enumerate([IDENTITY, *mutations]):
        suspect = apply_mutation(base, spec)
        report = fmr(suspect, triggers, table, key, wparams, decode_cfg, image_mutation=spec, concurrency=concurrency)
        rows.append(SweepRow(f"m{idx:02d}", spec, report))
        info(f"Sweep {spec.label()}: FMR {report.fmr:.3f}")
    return rows
