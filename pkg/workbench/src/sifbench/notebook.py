from __future__ import annotations

from importlib.resources import files
from pathlib import Path
from typing import Any

from sifbench.cli import RunContext, run_forge, run_pipeline as _run_pipeline, run_verify
from sifbench.config import ResolvedConfig, load_config, resolve_config


def find_repo_root(start: Path | None = None) -> Path | None:
    """Search upward for a checkout containing workbench/src/sifbench."""
    start_path = (start or Path.cwd()).resolve()
    for parent in [start_path, *start_path.parents]:
        if (parent / "workbench" / "src" / "sifbench").is_dir():
            return parent
    return None


def get_example_config(name: str = "baseline") -> Path:
    """Return an example manifest path (baseline/smoke) if available."""
    repo_root = find_repo_root()
    if repo_root:
        candidate = repo_root / "workbench" / "examples" / "configs" / f"{name}.yaml"
        if candidate.exists():
            return candidate

    packaged = files("sifbench.data.configs").joinpath(f"{name}.yaml")
    if packaged.is_file():
        return Path(str(packaged))

    raise FileNotFoundError(f"Could not locate example config '{name}'.")


def load_run(config_path: Path | str | None = None, **overrides: Any) -> RunContext:
    """Manifest (or defaults) with keyword overrides merged section by section."""
    if config_path is None:
        return RunContext(ResolvedConfig(resolve_config(overrides or None), None))
    config = load_config(_resolve_path(config_path))
    if overrides:
        config = ResolvedConfig(resolve_config(_merge_over(config.data, overrides)), config.source_path)
    return RunContext(config)


def forge_triggers(
    config_path: Path | str,
    model_path: Path | str,
    key_path: Path | str,
    out_dir: Path | str,
    *,
    rho: float | None = None,
):
    """Forge trigger bundles for one model."""
    out_dir = _resolve_path(out_dir)
    print(f"Forging triggers for {model_path} -> {out_dir}")
    run = load_run(config_path)
    return run_forge(run, _resolve_path(model_path), _resolve_path(key_path), out_dir, rho=rho)


def verify_model(
    config_path: Path | str,
    model_path: Path | str,
    triggers_dir: Path | str,
    thresholds_path: Path | str,
    key_path: Path | str,
    out_dir: Path | str,
    *,
    min_fmr: float = 0.5,
) -> bool:
    """True when the suspect matches at ``min_fmr`` or better."""
    run = load_run(config_path)
    code = run_verify(
        run,
        _resolve_path(model_path),
        _resolve_path(triggers_dir),
        _resolve_path(thresholds_path),
        _resolve_path(key_path),
        _resolve_path(out_dir),
        min_fmr=min_fmr,
    )
    return code == 0


def run_pipeline(config_path: Path | str, out_dir: Path | str, *, min_fmr: float = 0.5, **overrides: Any) -> int:
    """Run the full pipeline (gen-model -> forge -> calibrate -> verify -> sweep -> attack -> report).

    Args:
        config_path: Path to the YAML manifest.
        out_dir: Output directory for every artifact.
        min_fmr: Matching rate the owner model must reach for exit code 0.
        **overrides: Manifest sections to override, e.g. ``distill={"steps": 50}``.
    """
    out_dir = _resolve_path(out_dir)
    print(f"Running pipeline using {config_path} -> {out_dir}")
    return _run_pipeline(load_run(config_path, **overrides), out_dir, min_fmr=min_fmr)


def _merge_over(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def _resolve_path(path: Path | str) -> Path:
    return Path(path).expanduser().resolve()
