from __future__ import annotations

from pathlib import Path
from typing import Any

from jsonschema import Draft202012Validator

from sifbench.schemas import FMR_REPORT_SCHEMA, THRESHOLD_TABLE_SCHEMA, TRIGGER_META_SCHEMA
from sifbench.utils.io import read_json, write_json


def validate_document(document: Any, schema: dict[str, Any], label: str) -> None:
    """Raise one ValueError listing every schema violation in ``document``."""
    errors = [f"{label}: {err.message}" for err in Draft202012Validator(schema).iter_errors(document)]
    if errors:
        raise ValueError("; ".join(errors))


def validate_outputs(out_dir: Path) -> dict[str, Any]:
    """Check every trigger bundle and report under ``out_dir``; writes validation/report.json."""
    errors: list[str] = []
    warnings: list[str] = []
    checks = [
        (out_dir / "thresholds.json", THRESHOLD_TABLE_SCHEMA),
        (out_dir / "fmr_report.json", FMR_REPORT_SCHEMA),
    ]
    checks += [(meta, TRIGGER_META_SCHEMA) for meta in sorted((out_dir / "triggers").glob("*/meta.json"))]
    for path, schema in checks:
        if not path.exists():
            warnings.append(f"Missing {path.relative_to(out_dir)}")
            continue
        validator = Draft202012Validator(schema)
        for err in validator.iter_errors(read_json(path)):
            errors.append(f"{path.relative_to(out_dir)}: {err.message}")

    thresholds = out_dir / "thresholds.json"
    if thresholds.exists():
        for entry in read_json(thresholds).get("entries", []):
            if entry.get("tau") is None:
                warnings.append(f"Trigger {entry.get('trigger_id')} has no usable threshold")

    report = {
        "valid": len(errors) == 0,
        "error_count": len(errors),
        "errors": errors,
        "warning_count": len(warnings),
        "warnings": warnings,
    }
    write_json(out_dir / "validation" / "report.json", report)
    if errors:
        raise ValueError("Validation failed. See validation/report.json for details.")
    return report
