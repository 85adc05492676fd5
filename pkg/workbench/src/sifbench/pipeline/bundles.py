"""Trigger bundles on disk: ``<root>/<trigger_id>/{trigger.tensor, base.tensor, meta.json}``."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from sifbench.pipeline.safd import DistillConfig, TriggerArtifact, TriggerSpec
from sifbench.pipeline.validation import validate_document
from sifbench.schemas import TRIGGER_META_SCHEMA
from sifbench.utils.io import read_json, write_json
from sifbench.vlm.checkpoint import load_tensor, save_tensor

TRIGGER_FILE = "trigger.tensor"
BASE_FILE = "base.tensor"
META_FILE = "meta.json"


def artifact_meta(artifact: TriggerArtifact, stamp: Mapping[str, Any] | None = None) -> dict[str, Any]:
    meta: dict[str, Any] = {
        "trigger_id": artifact.trigger_id,
        "prompt": list(artifact.spec.prompt),
        "teacher_response": list(artifact.spec.teacher_response),
        "key_digest": artifact.spec.key_digest,
        "distill_config": artifact.distill_config.to_dict(),
        "initial_losses": dict(artifact.initial_losses),
        "final_losses": dict(artifact.final_losses),
        "history": list(artifact.history),
        "initial_z": artifact.initial_z,
        "final_z": artifact.final_z,
        "threshold": artifact.threshold,
    }
    if artifact.rho is not None:
        meta["rho"] = artifact.rho
        meta["injected_norms"] = list(artifact.injected_norms)
    if stamp:
        meta.update(stamp)
    return meta


def save_trigger(artifact: TriggerArtifact, root: Path, stamp: Mapping[str, Any] | None = None) -> Path:
    bundle = Path(root) / artifact.trigger_id
    bundle.mkdir(parents=True, exist_ok=True)
    save_tensor(artifact.trigger_image, bundle / TRIGGER_FILE)
    save_tensor(artifact.spec.base_image, bundle / BASE_FILE)
    write_json(bundle / META_FILE, artifact_meta(artifact, stamp))
    return bundle


def save_triggers(artifacts: Sequence[TriggerArtifact], root: Path, stamp: Mapping[str, Any] | None = None) -> Path:
    for artifact in artifacts:
        save_trigger(artifact, root, stamp)
    return Path(root)


def load_trigger(bundle: Path) -> TriggerArtifact:
    bundle = Path(bundle)
    for name in (TRIGGER_FILE, BASE_FILE, META_FILE):
        if not (bundle / name).exists():
            raise FileNotFoundError(f"Trigger bundle {bundle} is missing {name}")
    meta = read_json(bundle / META_FILE)
    validate_document(meta, TRIGGER_META_SCHEMA, str(bundle / META_FILE))
    spec = TriggerSpec(
        base_image=load_tensor(bundle / BASE_FILE),
        prompt=[int(t) for t in meta["prompt"]],
        key_digest=meta["key_digest"],
        teacher_response=[int(t) for t in meta["teacher_response"]],
        trigger_id=meta["trigger_id"],
    )
    return TriggerArtifact(
        trigger_image=load_tensor(bundle / TRIGGER_FILE),
        spec=spec,
        distill_config=DistillConfig.from_dict(meta["distill_config"]),
        initial_losses=dict(meta["initial_losses"]),
        final_losses=dict(meta["final_losses"]),
        history=list(meta["history"]),
        initial_z=meta["initial_z"],
        final_z=meta["final_z"],
        threshold=meta["threshold"],
        rho=meta.get("rho"),
        injected_norms=list(meta.get("injected_norms", [])),
    )


def load_triggers(root: Path) -> list[TriggerArtifact]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Trigger directory not found: {root}")
    bundles = sorted(p for p in root.iterdir() if (p / META_FILE).exists())
    if not bundles:
        raise FileNotFoundError(f"No trigger bundles under {root}")
    return [load_trigger(p) for p in bundles]
