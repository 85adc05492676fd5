from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import yaml

from sifbench import __version__
from sifbench.config import ResolvedConfig, load_config, resolve_config
from sifbench.errors import InvariantViolation, OptimizationDiverged, ParameterError
from sifbench.pipeline.bundles import load_triggers, save_triggers
from sifbench.pipeline.corpus import gibberish_prompt, load_image, make_sample, pretrain_model
from sifbench.pipeline.mutate import MutationSpec, apply_mutation
from sifbench.pipeline.rfo import RfoConfig, rfo_distill
from sifbench.pipeline.safd import DistillConfig, TriggerArtifact, build_trigger_specs, distill
from sifbench.pipeline.sda import FixedPhraseResponder, SdaConfig, serve_all, summarize
from sifbench.pipeline.validation import validate_document, validate_outputs
from sifbench.pipeline.verify import ThresholdTable, calibrate_thresholds, fmr, robustness_sweep
from sifbench.schemas import MUTATION_LIST_SCHEMA, MUTATION_SPEC_SCHEMA, QUERY_LINE_SCHEMA, THRESHOLD_TABLE_SCHEMA
from sifbench.utils.console import console, error, info, warn
from sifbench.utils.hashing import file_digest
from sifbench.utils.io import read_json, read_jsonl, write_csv, write_json, write_jsonl, write_yaml
from sifbench.utils.parallel import map_concurrently
from sifbench.vlm.checkpoint import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from sifbench.vlm.decoding import DecodeConfig
from sifbench.vlm.model import ModelConfig, ModelParams
from sifbench.vlm.tokenizer import decode as detokenize
from sifbench.vlm.tokenizer import encode
from sifbench.wmark import WatermarkKey, WatermarkParams, load_key, save_key

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_MATCHED = 2
EXIT_INTERNAL = 3

REPORT_COLUMNS = ("trigger_id", "mutation", "z", "tau", "matched")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ParameterError(f"{self.prog}: {message}")


@dataclass
class RunContext:
    """Resolved manifest plus the provenance stamp written into every output."""

    config: ResolvedConfig

    @property
    def data(self) -> dict[str, Any]:
        return self.config.data

    @property
    def stamp(self) -> dict[str, str]:
        return {"manifest_hash": self.config.manifest_hash, "tool_version": __version__}

    @property
    def concurrency(self) -> int:
        return int(self.data["runtime"]["concurrency"])

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.data["model"]["config"])

    def watermark(self) -> WatermarkParams:
        return WatermarkParams.from_dict(self.data["watermark"])

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig.from_dict(self.data["decode"])

    def distill_config(self) -> DistillConfig:
        return DistillConfig.from_dict(self.data["distill"])

    def sda_config(self) -> SdaConfig:
        sda = self.data["sda"]
        return SdaConfig(
            ppl_threshold=float(sda["ppl_threshold"]),
            jaccard_threshold=float(sda["jaccard_threshold"]),
            sem_threshold=float(sda["sem_threshold"]),
        )

    def mutations(self) -> list[MutationSpec]:
        return [MutationSpec.from_dict(m) for m in self.data["mutations"]]

    def path(self, value: str | Path | None) -> Path | None:
        return self.config.resolve_path(value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sifbench")
    parser.add_argument("--version", action="version", version=f"sifbench {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def _common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--manifest", type=Path)
        sub.add_argument("--seed", type=int)
        sub.add_argument("--out", type=Path)

    gen_parser = subparsers.add_parser("gen-model")
    _common(gen_parser)
    gen_parser.add_argument("--count", type=int, help="Number of unrelated models.")
    gen_parser.add_argument("--steps", type=int, help="Pretraining steps per model.")
    gen_parser.set_defaults(handler=_cmd_gen_model)

    forge_parser = subparsers.add_parser("forge")
    _common(forge_parser)
    forge_parser.add_argument("--model", type=Path)
    forge_parser.add_argument("--key", type=Path)
    forge_parser.add_argument("--rho", type=float)
    forge_parser.add_argument("--steps", type=int)
    forge_parser.add_argument("--epsilon", type=float)
    forge_parser.add_argument("--count", type=int)
    forge_parser.set_defaults(handler=_cmd_forge)

    calibrate_parser = subparsers.add_parser("calibrate")
    _common(calibrate_parser)
    calibrate_parser.add_argument("--triggers", type=Path)
    calibrate_parser.add_argument("--unrelated", type=Path, nargs="+")
    calibrate_parser.add_argument("--key", type=Path)
    calibrate_parser.set_defaults(handler=_cmd_calibrate)

    verify_parser = subparsers.add_parser("verify")
    _common(verify_parser)
    verify_parser.add_argument("--model", type=Path)
    verify_parser.add_argument("--triggers", type=Path)
    verify_parser.add_argument("--thresholds", type=Path)
    verify_parser.add_argument("--key", type=Path)
    verify_parser.add_argument("--min-fmr", type=float, default=0.5)
    verify_parser.add_argument("--mutations", type=Path, help="JSON list of mutation specs to sweep.")
    verify_parser.set_defaults(handler=_cmd_verify)

    mutate_parser = subparsers.add_parser("mutate")
    _common(mutate_parser)
    mutate_parser.add_argument("--model", type=Path)
    mutate_parser.add_argument("--mutation", required=True, help="Mutation spec as a JSON file path or inline JSON.")
    mutate_parser.set_defaults(handler=_cmd_mutate)

    attack_parser = subparsers.add_parser("attack")
    _common(attack_parser)
    attack_parser.add_argument("--model", type=Path, help="Suspect (stolen) model checkpoint.")
    attack_parser.add_argument("--reference", type=Path, required=True)
    attack_parser.add_argument("--queries", type=Path, required=True)
    attack_parser.add_argument("--phrase-triggers", type=Path, help="Simulate a fixed-phrase fingerprint on these triggers.")
    attack_parser.set_defaults(handler=_cmd_attack)

    report_parser = subparsers.add_parser("report")
    _common(report_parser)
    report_parser.add_argument("--inputs", type=Path, nargs="+", required=True)
    report_parser.set_defaults(handler=_cmd_report)

    pipeline_parser = subparsers.add_parser("pipeline")
    _common(pipeline_parser)
    pipeline_parser.add_argument("--rho", type=float)
    pipeline_parser.add_argument("--steps", type=int)
    pipeline_parser.add_argument("--epsilon", type=float)
    pipeline_parser.add_argument("--min-fmr", type=float, default=0.5)
    pipeline_parser.set_defaults(handler=_cmd_pipeline)
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return int(args.handler(args) or EXIT_OK)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (InvariantViolation, OptimizationDiverged) as exc:
        error(f"Internal invariant violated: {exc}")
        return EXIT_INTERNAL
    except (FileNotFoundError, ValueError, yaml.YAMLError) as exc:
        error(str(exc))
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        error(f"Unexpected failure: {exc!r}")
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run_command())


def load_run(args: argparse.Namespace) -> RunContext:
    manifest = getattr(args, "manifest", None)
    if manifest is not None:
        config = load_config(_resolve_path(manifest))
    else:
        config = ResolvedConfig(data=resolve_config(), source_path=None)
    data = config.data
    if getattr(args, "seed", None) is not None:
        data["seed"] = int(args.seed)
    if getattr(args, "rho", None) is not None:
        data["rfo"]["rho"] = float(args.rho)
    if getattr(args, "epsilon", None) is not None:
        data["distill"]["epsilon"] = float(args.epsilon)
    return RunContext(config)


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ParameterError(f"No {what} given; pass it as a flag or in the manifest.")
    path = _resolve_path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _out_dir(args: argparse.Namespace, run: RunContext) -> Path:
    return _resolve_path(args.out if args.out is not None else Path(run.data["output_dir"]))


def _resolve_path(path: Path) -> Path:
    return Path(path).expanduser().resolve()


# gen-model


def run_gen_model(run: RunContext, out_dir: Path, *, count: int | None = None) -> dict[str, Path]:
    data = run.data
    seed = int(data["seed"])
    model_cfg = run.model_config()
    model_section = data["model"]
    unrelated = int(data["unrelated"]["count"]) if count is None else int(count)
    if unrelated < 1:
        raise ParameterError("At least one unrelated model is required.")
    offset = int(data["unrelated"]["seed_offset"])
    jobs = [("owner", seed)]
    jobs += [(f"unrelated_{i:02d}", seed + offset + i) for i in range(unrelated)]
    jobs.append(("heldout", seed + int(data["heldout"]["seed_offset"])))

    console.print(f"[cyan]Pretraining {len(jobs)} toy models.[/cyan]")
    models = map_concurrently(
        lambda job: pretrain_model(
            job[1],
            model_cfg,
            steps=int(model_section["pretrain_steps"]),
            lr=float(model_section["pretrain_lr"]),
            batch_size=int(model_section["batch_size"]),
            samples=int(model_section["corpus_samples"]),
        ),
        jobs,
        limit=run.concurrency,
        progress_desc="Pretraining",
    )
    paths: dict[str, Path] = {}
    records = []
    for (name, model_seed), params in zip(jobs, models):
        path = save_checkpoint(params, out_dir / "models" / f"{name}.ckpt")
        paths[name] = path
        records.append({"digest": file_digest(path), "name": name, "seed": model_seed})
    paths["key"] = save_key(WatermarkKey.generate(seed), out_dir / "key.json")
    write_json(out_dir / "models" / "models.json", {"models": records, **run.stamp})
    console.print(f"[green]Wrote {len(jobs)} checkpoints and key to {out_dir}[/green]")
    return paths


def _cmd_gen_model(args: argparse.Namespace) -> int:
    run = load_run(args)
    if args.steps is not None:
        run.data["model"]["pretrain_steps"] = int(args.steps)
    run_gen_model(run, _out_dir(args, run), count=args.count)
    return EXIT_OK


# forge


def run_forge(
    run: RunContext,
    model_path: Path,
    key_path: Path,
    out_dir: Path,
    *,
    rho: float | None = None,
    count: int | None = None,
) -> list[TriggerArtifact]:
    params = load_checkpoint(model_path)
    key = load_key(key_path)
    wparams = run.watermark()
    decode_cfg = run.decode_config()
    triggers = run.data["triggers"]
    gain = triggers.get("min_teacher_gain")
    specs = build_trigger_specs(
        params,
        key,
        wparams,
        count=int(triggers["count"]) if count is None else int(count),
        seed=int(run.data["seed"]),
        max_attempts=int(triggers["max_attempts"]),
        max_len=decode_cfg.max_len,
        prompts=list(triggers.get("prompts") or []),
        min_teacher_gain=None if gain is None else float(gain),
    )
    if rho is None:
        cfg: DistillConfig = run.distill_config()
        console.print(f"[cyan]Distilling {len(specs)} triggers.[/cyan]")
        forge_one = lambda spec: distill(params, spec, cfg, key, wparams, decode_cfg=decode_cfg)  # noqa: E731
    else:
        cfg = RfoConfig.from_dict({**run.data["distill"], "rho": rho})
        console.print(f"[cyan]Distilling {len(specs)} triggers with worst-case shifts (rho={rho}).[/cyan]")
        forge_one = lambda spec: rfo_distill(params, spec, cfg, key, wparams, decode_cfg=decode_cfg)  # noqa: E731
    artifacts = map_concurrently(forge_one, specs, limit=run.concurrency, progress_desc="Forging")
    save_triggers(artifacts, out_dir / "triggers", run.stamp)
    improved = sum(
        1 for a in artifacts if a.initial_z is not None and a.final_z is not None and a.final_z > a.initial_z
    )
    write_json(
        out_dir / "forge_summary.json",
        {
            "improved": improved,
            "model_digest": file_digest(model_path),
            "rho": rho,
            "triggers": [
                {"final_z": a.final_z, "initial_z": a.initial_z, "trigger_id": a.trigger_id} for a in artifacts
            ],
            **run.stamp,
        },
    )
    console.print(f"[green]Forged {len(artifacts)} triggers ({improved} with higher z).[/green]")
    return artifacts


def _cmd_forge(args: argparse.Namespace) -> int:
    run = load_run(args)
    if args.steps is not None:
        run.data["distill"]["steps"] = int(args.steps)
    model_path = _require(args.model or run.path(run.data["model"]["checkpoint"]), "model checkpoint")
    key_path = _require(args.key or run.path(run.data["key"]["path"]), "key file")
    run_forge(run, model_path, key_path, _out_dir(args, run), rho=args.rho, count=args.count)
    return EXIT_OK


# calibrate


def run_calibrate(
    run: RunContext,
    triggers_dir: Path,
    unrelated_paths: Sequence[Path],
    key_path: Path,
    out_dir: Path,
) -> ThresholdTable:
    if _resolve_path(out_dir / "triggers") == _resolve_path(triggers_dir):
        raise ParameterError("calibrate would overwrite its input trigger bundles; choose another --out.")
    triggers = load_triggers(triggers_dir)
    unrelated = [load_checkpoint(p) for p in unrelated_paths]
    key = load_key(key_path)
    table = calibrate_thresholds(
        triggers, unrelated, key, run.watermark(), run.decode_config(), concurrency=run.concurrency
    )
    table = ThresholdTable(table.entries, table.key_digest, [file_digest(p) for p in unrelated_paths], table.decode_config)
    write_json(out_dir / "thresholds.json", {**table.to_dict(), **run.stamp})
    save_triggers(table.apply(triggers), out_dir / "triggers", run.stamp)
    console.print(f"[green]Wrote thresholds for {len(triggers)} triggers to {out_dir}[/green]")
    return table


def _cmd_calibrate(args: argparse.Namespace) -> int:
    run = load_run(args)
    triggers_dir = _require(args.triggers, "trigger directory")
    paths = args.unrelated or [run.path(p) for p in run.data["unrelated"]["checkpoints"]]
    if not paths:
        raise ParameterError("No unrelated checkpoints given.")
    unrelated = [_require(p, "unrelated checkpoint") for p in paths]
    key_path = _require(args.key or run.path(run.data["key"]["path"]), "key file")
    run_calibrate(run, triggers_dir, unrelated, key_path, _out_dir(args, run))
    return EXIT_OK


# verify


def load_thresholds(path: Path) -> ThresholdTable:
    data = read_json(path)
    validate_document(data, THRESHOLD_TABLE_SCHEMA, str(path))
    return ThresholdTable.from_dict(data)


def load_mutations(path: Path) -> list[MutationSpec]:
    data = read_json(path)
    validate_document(data, MUTATION_LIST_SCHEMA, str(path))
    return [MutationSpec.from_dict(item) for item in data]


def run_verify(
    run: RunContext,
    model_path: Path,
    triggers_dir: Path,
    thresholds_path: Path,
    key_path: Path,
    out_dir: Path,
    *,
    min_fmr: float,
    mutations: Sequence[MutationSpec] | None = None,
) -> int:
    if not 0.0 <= min_fmr <= 1.0:
        raise ParameterError("--min-fmr must lie in [0, 1].")
    suspect = load_checkpoint(model_path)
    triggers = load_triggers(triggers_dir)
    table = load_thresholds(thresholds_path)
    key = load_key(key_path)
    wparams, decode_cfg = run.watermark(), run.decode_config()
    report = fmr(
        suspect,
        triggers,
        table,
        key,
        wparams,
        decode_cfg,
        concurrency=run.concurrency,
        suspect_digest=file_digest(model_path),
    )
    write_json(out_dir / "fmr_report.json", {**report.to_dict(), **run.stamp})
    console.print(f"FMR {report.fmr:.4f} ({report.matched}/{len(report.entries)} triggers matched)")

    if mutations:
        rows = robustness_sweep(
            suspect, triggers, table, list(mutations), key, wparams, decode_cfg, concurrency=run.concurrency
        )
        write_json(
            out_dir / "sweep_report.json",
            {"baseline_fmr": rows[0].report.fmr, "rows": [row.to_dict() for row in rows], **run.stamp},
        )
        for row in rows:
            console.print(f"  {row.mutation.label():<48} FMR {row.report.fmr:.4f}")

    if report.fmr < min_fmr:
        warn(f"Verdict: not matched (FMR {report.fmr:.4f} < {min_fmr}).")
        return EXIT_NOT_MATCHED
    console.print(f"[green]Verdict: matched (FMR {report.fmr:.4f} >= {min_fmr}).[/green]")
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    run = load_run(args)
    model_path = _require(args.model or run.path(run.data["model"]["checkpoint"]), "model checkpoint")
    triggers_dir = _require(args.triggers, "trigger directory")
    thresholds_path = _require(args.thresholds, "threshold table")
    key_path = _require(args.key or run.path(run.data["key"]["path"]), "key file")
    mutations = load_mutations(_require(args.mutations, "mutation list")) if args.mutations else None
    return run_verify(
        run,
        model_path,
        triggers_dir,
        thresholds_path,
        key_path,
        _out_dir(args, run),
        min_fmr=args.min_fmr,
        mutations=mutations,
    )


# mutate


def parse_mutation(text: str) -> MutationSpec:
    candidate = Path(text).expanduser()
    if candidate.suffix == ".json" or candidate.exists():
        data = read_json(_require(candidate, "mutation spec"))
    else:
        data = yaml.safe_load(text)
    validate_document(data, MUTATION_SPEC_SCHEMA, "mutation")
    return MutationSpec.from_dict(data)


def run_mutate(run: RunContext, model_path: Path, spec: MutationSpec, out_dir: Path) -> Path:
    if spec.input_level:
        raise ParameterError(f"Mutation {spec.kind} applies to query images, not checkpoints.")
    params = load_checkpoint(model_path)
    mutated = apply_mutation(params, spec)
    path = save_checkpoint(mutated, out_dir / "mutated.ckpt")
    write_json(
        out_dir / "mutation.json",
        {"mutation": spec.to_dict(), "output_digest": file_digest(path), "source_digest": file_digest(model_path), **run.stamp},
    )
    console.print(f"[green]Applied {spec.label()} -> {path}[/green]")
    return path


def _cmd_mutate(args: argparse.Namespace) -> int:
    run = load_run(args)
    model_path = _require(args.model or run.path(run.data["model"]["checkpoint"]), "model checkpoint")
    run_mutate(run, model_path, parse_mutation(args.mutation), _out_dir(args, run))
    return EXIT_OK


# attack


def _load_query_image(path: Path, config: ModelConfig) -> torch.Tensor:
    if path.suffix == ".tensor":
        return load_tensor(path)
    return load_image(path, config.image_size)


def load_queries(path: Path, config: ModelConfig) -> list[dict[str, Any]]:
    lines = read_jsonl(path)
    if not lines:
        raise ParameterError(f"Query manifest {path} is empty.")
    queries = []
    for idx, line in enumerate(lines):
        validate_document(line, QUERY_LINE_SCHEMA, f"{path}:{idx + 1}")
        image_path = _require(path.parent / line["image"], "query image")
        queries.append(
            {
                "class": line.get("class", "query"),
                "id": line.get("id", f"q{idx:04d}"),
                "image": _load_query_image(image_path, config),
                "prompt": encode(line["prompt"]),
            }
        )
    return queries


def run_attack(
    run: RunContext,
    model_path: Path,
    reference_path: Path,
    queries_path: Path,
    out_dir: Path,
    *,
    phrase_triggers: Path | None = None,
) -> dict[str, Any]:
    stolen_params = load_checkpoint(model_path)
    reference = load_checkpoint(reference_path)
    queries = load_queries(queries_path, stolen_params.config)
    stolen: Any = stolen_params
    if phrase_triggers is not None:
        images = [t.trigger_image for t in load_triggers(phrase_triggers)]
        stolen = FixedPhraseResponder.for_images(stolen_params, images, run.data["sda"]["phrase"])
    decisions = serve_all(
        stolen,
        reference,
        [(q["image"], q["prompt"]) for q in queries],
        run.sda_config(),
        run.decode_config(),
        concurrency=run.concurrency,
    )
    write_jsonl(
        out_dir / "decisions.jsonl",
        ({"class": q["class"], "id": q["id"], **d.to_dict()} for q, d in zip(queries, decisions)),
    )
    by_class: dict[str, list] = {}
    for query, decision in zip(queries, decisions):
        by_class.setdefault(query["class"], []).append(decision)
    summary = {
        "by_class": {name: summarize(items) for name, items in sorted(by_class.items())},
        "fixed_phrase": phrase_triggers is not None,
        "overall": summarize(decisions),
        "sda_config": run.sda_config().to_dict(),
        **run.stamp,
    }
    write_json(out_dir / "attack_summary.json", summary)
    console.print(f"[green]Gateway flagged {summary['overall']['flagged']}/{len(decisions)} queries.[/green]")
    return summary


def _cmd_attack(args: argparse.Namespace) -> int:
    run = load_run(args)
    model_path = _require(args.model or run.path(run.data["model"]["checkpoint"]), "model checkpoint")
    reference_path = _require(args.reference, "reference checkpoint")
    queries_path = _require(args.queries, "query manifest")
    phrase = _require(args.phrase_triggers, "trigger directory") if args.phrase_triggers else None
    run_attack(run, model_path, reference_path, queries_path, _out_dir(args, run), phrase_triggers=phrase)
    return EXIT_OK


# report


def _format(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return value


def report_rows(documents: Sequence[dict[str, Any]]) -> list[tuple[Any, ...]]:
    keyed = []
    order = 0
    for document in documents:
        if "rows" in document:
            reports = [(row["mutation_id"], row["label"], row["report"]) for row in document["rows"]]
        elif "entries" in document and "fmr" in document:
            reports = [("", document.get("mutation", "identity"), document)]
        else:
            raise ParameterError("Report input is neither an FMR report nor a sweep report.")
        for mutation_id, label, report in reports:
            for entry in report["entries"]:
                keyed.append(((entry["trigger_id"], order, mutation_id), entry, label))
            order += 1
    keyed.sort(key=lambda item: item[0])
    return [
        (entry["trigger_id"], label, _format(entry["z"]), _format(entry["tau"]), _format(entry["matched"]))
        for _, entry, label in keyed
    ]


def run_report(inputs: Sequence[Path], out_path: Path) -> Path:
    rows = report_rows([read_json(p) for p in inputs])
    write_csv(out_path, REPORT_COLUMNS, rows)
    console.print(f"[green]Wrote {len(rows)} rows to {out_path}[/green]")
    return out_path


def _cmd_report(args: argparse.Namespace) -> int:
    run = load_run(args)
    inputs = [_require(p, "report input") for p in args.inputs]
    run_report(inputs, _out_dir(args, run) / "report.csv")
    return EXIT_OK


# pipeline


def write_query_set(run: RunContext, triggers: Sequence[TriggerArtifact], out_dir: Path) -> Path:
    """Normal, gibberish and trigger queries as tensor files plus a JSONL manifest."""
    seed = int(run.data["seed"])
    sda = run.data["sda"]
    image_size = run.model_config().image_size
    lines = []
    for idx in range(int(sda["normal_queries"])):
        sample = make_sample(seed, idx, image_size, stream="queries")
        save_tensor(sample.image, out_dir / "images" / f"normal_{idx:03d}.tensor")
        lines.append({"class": "normal", "id": f"normal_{idx:03d}", "image": f"images/normal_{idx:03d}.tensor", "prompt": sample.prompt})
    for idx in range(int(sda["gibberish_queries"])):
        sample = make_sample(seed, idx, image_size, stream="gibberish-images")
        # Invalid UTF-8 comes back as U+FFFD (three bytes each), so keep it short.
        prompt = detokenize(gibberish_prompt(seed, idx, length=10))
        save_tensor(sample.image, out_dir / "images" / f"gibberish_{idx:03d}.tensor")
        lines.append({"class": "gibberish", "id": f"gibberish_{idx:03d}", "image": f"images/gibberish_{idx:03d}.tensor", "prompt": prompt})
    for trigger in triggers:
        name = f"trigger_{trigger.trigger_id}"
        save_tensor(trigger.trigger_image, out_dir / "images" / f"{name}.tensor")
        lines.append({"class": "trigger", "id": name, "image": f"images/{name}.tensor", "prompt": detokenize(trigger.spec.prompt)})
    path = out_dir / "queries.jsonl"
    write_jsonl(path, lines)
    return path


def run_pipeline(run: RunContext, out_dir: Path, *, min_fmr: float = 0.5) -> int:
    data = run.data
    out_dir.mkdir(parents=True, exist_ok=True)
    write_yaml(out_dir / "meta" / "config_resolved.yaml", data)

    owner = run.path(data["model"]["checkpoint"])
    key_path = run.path(data["key"]["path"])
    unrelated = [run.path(p) for p in data["unrelated"]["checkpoints"]]
    generated: dict[str, Path] = {}
    if owner is None or not unrelated or key_path is None:
        generated = run_gen_model(run, out_dir)
    owner = _require(owner or generated["owner"], "model checkpoint")
    key_path = _require(key_path or generated["key"], "key file")
    if not unrelated:
        unrelated = [path for name, path in sorted(generated.items()) if name.startswith("unrelated_")]
    unrelated = [_require(p, "unrelated checkpoint") for p in unrelated]

    rho = float(data["rfo"]["rho"])
    run_forge(run, owner, key_path, out_dir / "forge", rho=rho if rho > 0 else None)
    run_calibrate(run, out_dir / "forge" / "triggers", unrelated, key_path, out_dir)
    verdict = run_verify(
        run,
        owner,
        out_dir / "triggers",
        out_dir / "thresholds.json",
        key_path,
        out_dir,
        min_fmr=min_fmr,
        mutations=run.mutations() or None,
    )

    if "heldout" in generated:
        heldout = fmr(
            load_checkpoint(generated["heldout"]),
            load_triggers(out_dir / "triggers"),
            load_thresholds(out_dir / "thresholds.json"),
            load_key(key_path),
            run.watermark(),
            run.decode_config(),
            concurrency=run.concurrency,
            suspect_digest=file_digest(generated["heldout"]),
        )
        write_json(out_dir / "heldout_fmr_report.json", {**heldout.to_dict(), **run.stamp})
        info(f"Held-out unrelated model FMR {heldout.fmr:.4f}")
        reference = generated["heldout"]
    else:
        reference = unrelated[0]

    queries = write_query_set(run, load_triggers(out_dir / "triggers"), out_dir / "attack")
    run_attack(run, owner, reference, queries, out_dir / "attack" / "safd")
    run_attack(run, owner, reference, queries, out_dir / "attack" / "fixed_phrase", phrase_triggers=out_dir / "triggers")

    report_input = out_dir / "sweep_report.json"
    if not report_input.exists():
        report_input = out_dir / "fmr_report.json"
    run_report([report_input], out_dir / "report.csv")
    validate_outputs(out_dir)
    console.print(f"[green]Pipeline finished at {out_dir}[/green]")
    return verdict


def _cmd_pipeline(args: argparse.Namespace) -> int:
    run = load_run(args)
    if args.steps is not None:
        run.data["distill"]["steps"] = int(args.steps)
    return run_pipeline(run, _out_dir(args, run), min_fmr=args.min_fmr)


if __name__ == "__main__":
    main()
