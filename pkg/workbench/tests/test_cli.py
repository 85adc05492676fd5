from __future__ import annotations

import importlib.util
import json
import tempfile
import unittest
from pathlib import Path

TORCH_AVAILABLE = importlib.util.find_spec("torch") is not None
DEPS_AVAILABLE = TORCH_AVAILABLE and all(
    importlib.util.find_spec(name) is not None for name in ("yaml", "jsonschema", "rich", "PIL", "tqdm")
)

if DEPS_AVAILABLE:
    import torch
    import yaml

    from sifbench.cli import EXIT_INPUT, EXIT_NOT_MATCHED, EXIT_OK, report_rows, run_command
    from sifbench.pipeline.bundles import save_triggers
    from sifbench.pipeline.safd import DistillConfig, TriggerArtifact, TriggerSpec
    from sifbench.utils.io import read_json, write_json
    from sifbench.vlm.checkpoint import save_checkpoint, save_tensor
    from sifbench.vlm.model import ModelConfig, init_model
    from sifbench.vlm.tokenizer import BYTE_OFFSET, encode
    from sifbench.wmark import WatermarkKey, save_key

TINY = {
    "image_size": 8,
    "channels": 3,
    "patch_size": 4,
    "vocab_size": 300,
    "embed_dim": 16,
    "layers": 2,
    "heads": 2,
    "max_seq_len": 160,
}


def write_manifest(path: Path, **sections) -> Path:
    manifest = {
        "seed": 3,
        "model": {"config": TINY, "pretrain_steps": 2, "batch_size": 2, "corpus_samples": 4},
        "unrelated": {"count": 1},
        "decode": {"max_len": 16},
        "runtime": {"concurrency": 1},
        **sections,
    }
    path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    return path


def make_trigger(key, index: int) -> "TriggerArtifact":
    gen = torch.Generator().manual_seed(200 + index)
    base = torch.rand((3, 8, 8), generator=gen, dtype=torch.float64)
    response = [BYTE_OFFSET + 97 + (3 * i + index) % 26 for i in range(80)]
    spec = TriggerSpec(base, encode("what is shown?"), key.digest(), response, trigger_id=f"t{index:03d}")
    return TriggerArtifact(base.clone(), spec, DistillConfig(steps=1), {}, {})


@unittest.skipUnless(DEPS_AVAILABLE, "Workbench dependencies are not installed in the test environment.")
class TestCliErrors(unittest.TestCase):
    def test_unknown_argument_is_input_error(self) -> None:
        self.assertEqual(run_command(["verify", "--bogus"]), EXIT_INPUT)
        self.assertEqual(run_command(["no-such-command"]), EXIT_INPUT)

    def test_help_exits_cleanly(self) -> None:
        self.assertEqual(run_command(["--help"]), EXIT_OK)

    def test_missing_files(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = Path(tmp_dir)
            self.assertEqual(run_command(["gen-model", "--manifest", str(tmp / "absent.yaml")]), EXIT_INPUT)
            code = run_command(
                [
                    "verify",
                    "--model", str(tmp / "m.ckpt"),
                    "--triggers", str(tmp / "triggers"),
                    "--thresholds", str(tmp / "thresholds.json"),
                    "--key", str(tmp / "key.json"),
                    "--out", str(tmp / "out"),
                ]
            )
            self.assertEqual(code, EXIT_INPUT)

    def test_malformed_manifest(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            manifest = Path(tmp_dir) / "bad.yaml"
            manifest.write_text("seed: [unclosed\n", encoding="utf-8")
            self.assertEqual(run_command(["gen-model", "--manifest", str(manifest)]), EXIT_INPUT)
            manifest.write_text("watermark: {gamma: 1.5}\n", encoding="utf-8")
            self.assertEqual(run_command(["gen-model", "--manifest", str(manifest)]), EXIT_INPUT)

    def test_mutate(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = Path(tmp_dir)
            model = save_checkpoint(init_model(0, ModelConfig(**TINY)), tmp / "model.ckpt")
            args = ["mutate", "--model", str(model), "--out", str(tmp / "out")]
            self.assertEqual(run_command([*args, "--mutation", '{"kind": "resize"}']), EXIT_INPUT)
            self.assertEqual(run_command([*args, "--mutation", '{"kind": "melt"}']), EXIT_INPUT)
            self.assertEqual(run_command([*args, "--mutation", '{"kind": "quantize", "params": {"bits": 4}}']), EXIT_OK)
            self.assertTrue((tmp / "out" / "mutated.ckpt").exists())
            record = read_json(tmp / "out" / "mutation.json")
            self.assertEqual(record["mutation"], {"kind": "quantize", "params": {"bits": 4}})
            self.assertNotEqual(record["output_digest"], record["source_digest"])


@unittest.skipUnless(DEPS_AVAILABLE, "Workbench dependencies are not installed in the test environment.")
class TestReport(unittest.TestCase):
    def test_rows_are_sorted_and_formatted(self) -> None:
        document = {
            "fmr": 0.5,
            "mutation": "identity",
            "entries": [
                {"trigger_id": "t001", "z": 1.5, "tau": None, "matched": False},
                {"trigger_id": "t000", "z": None, "tau": 0.25, "matched": True},
            ],
        }
        self.assertEqual(
            report_rows([document]),
            [("t000", "identity", "", "0.25", "true"), ("t001", "identity", "1.5", "", "false")],
        )

    def test_report_command_writes_csv(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = Path(tmp_dir)
            sweep = {
                "baseline_fmr": 1.0,
                "rows": [
                    {
                        "mutation_id": "m00",
                        "label": "identity",
                        "report": {"fmr": 1.0, "entries": [{"trigger_id": "t000", "z": 2.0, "tau": 1.0, "matched": True}]},
                    },
                    {
                        "mutation_id": "m01",
                        "label": "quantize:bits=4",
                        "report": {"fmr": 0.0, "entries": [{"trigger_id": "t000", "z": 0.5, "tau": 1.0, "matched": False}]},
                    },
                ],
            }
            write_json(tmp / "sweep_report.json", sweep)
            self.assertEqual(run_command(["report", "--inputs", str(tmp / "sweep_report.json"), "--out", str(tmp)]), EXIT_OK)
            lines = (tmp / "report.csv").read_text(encoding="utf-8").splitlines()
            self.assertEqual(lines[0], "trigger_id,mutation,z,tau,matched")
            self.assertEqual(lines[1:], ["t000,identity,2.0,1.0,true", "t000,quantize:bits=4,0.5,1.0,false"])
            write_json(tmp / "other.json", {"hello": 1})
            self.assertEqual(run_command(["report", "--inputs", str(tmp / "other.json"), "--out", str(tmp)]), EXIT_INPUT)


@unittest.skipUnless(DEPS_AVAILABLE, "Workbench dependencies are not installed in the test environment.")
class TestGenModel(unittest.TestCase):
    def test_same_manifest_gives_identical_outputs(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = Path(tmp_dir)
            manifest = write_manifest(tmp / "manifest.yaml")
            for name in ("a", "b"):
                self.assertEqual(run_command(["gen-model", "--manifest", str(manifest), "--out", str(tmp / name)]), EXIT_OK)
            produced = sorted(p.relative_to(tmp / "a") for p in (tmp / "a").rglob("*") if p.is_file())
            self.assertEqual(
                [str(p) for p in produced],
                ["key.json", "models/heldout.ckpt", "models/models.json", "models/owner.ckpt", "models/unrelated_00.ckpt"],
            )
            for rel in produced:
                self.assertEqual((tmp / "a" / rel).read_bytes(), (tmp / "b" / rel).read_bytes(), str(rel))

    def test_seed_flag_changes_stamp(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = Path(tmp_dir)
            manifest = write_manifest(tmp / "manifest.yaml")
            run_command(["gen-model", "--manifest", str(manifest), "--out", str(tmp / "a")])
            run_command(["gen-model", "--manifest", str(manifest), "--seed", "4", "--out", str(tmp / "b")])
            first = read_json(tmp / "a" / "models" / "models.json")
            second = read_json(tmp / "b" / "models" / "models.json")
            self.assertNotEqual(first["manifest_hash"], second["manifest_hash"])
            self.assertEqual(second["models"][0]["seed"], 4)


@unittest.skipUnless(DEPS_AVAILABLE, "Workbench dependencies are not installed in the test environment.")
class TestCalibrateVerify(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.manifest = write_manifest(self.tmp / "manifest.yaml")
        config = ModelConfig(**TINY)
        self.models = [save_checkpoint(init_model(seed, config), self.tmp / f"u{seed}.ckpt") for seed in (21, 22)]
        key = WatermarkKey.generate(9)
        self.key = save_key(key, self.tmp / "key.json")
        self.forged = save_triggers([make_trigger(key, idx) for idx in range(2)], self.tmp / "forge" / "triggers")
        code = run_command(
            [
                "calibrate",
                "--manifest", str(self.manifest),
                "--triggers", str(self.forged),
                "--unrelated", *map(str, self.models),
                "--key", str(self.key),
                "--out", str(self.tmp / "cal"),
            ]
        )
        self.assertEqual(code, EXIT_OK)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def _verify(self, *extra: str) -> int:
        return run_command(
            [
                "verify",
                "--manifest", str(self.manifest),
                "--model", str(self.models[0]),
                "--triggers", str(self.tmp / "cal" / "triggers"),
                "--thresholds", str(self.tmp / "cal" / "thresholds.json"),
                "--out", str(self.tmp / "verify"),
                *extra,
            ]
        )

    def test_thresholds_written(self) -> None:
        table = read_json(self.tmp / "cal" / "thresholds.json")
        self.assertEqual([e["trigger_id"] for e in table["entries"]], ["t000", "t001"])
        self.assertEqual(len(table["models"]), 2)
        self.assertIn("manifest_hash", table)
        meta = read_json(self.tmp / "cal" / "triggers" / "t000" / "meta.json")
        self.assertEqual(meta["threshold"], table["entries"][0]["tau"])

    def test_calibration_model_is_not_matched(self) -> None:
        self.assertEqual(self._verify("--key", str(self.key)), EXIT_NOT_MATCHED)
        report = read_json(self.tmp / "verify" / "fmr_report.json")
        self.assertEqual(report["fmr"], 0.0)
        self.assertEqual(self._verify("--key", str(self.key), "--min-fmr", "0"), EXIT_OK)

    def test_sweep_report(self) -> None:
        mutations = self.tmp / "mutations.json"
        write_json(mutations, [{"kind": "quantize", "params": {"bits": 8}}])
        self._verify("--key", str(self.key), "--mutations", str(mutations))
        sweep = read_json(self.tmp / "verify" / "sweep_report.json")
        self.assertEqual([row["mutation_id"] for row in sweep["rows"]], ["m00", "m01"])
        self.assertEqual(sweep["baseline_fmr"], 0.0)

    def test_key_mismatch(self) -> None:
        other = save_key(WatermarkKey.generate(10), self.tmp / "other_key.json")
        self.assertEqual(self._verify("--key", str(other)), EXIT_INPUT)

    def test_calibrate_refuses_to_overwrite_inputs(self) -> None:
        code = run_command(
            [
                "calibrate",
                "--manifest", str(self.manifest),
                "--triggers", str(self.forged),
                "--unrelated", str(self.models[0]),
                "--key", str(self.key),
                "--out", str(self.tmp / "forge"),
            ]
        )
        self.assertEqual(code, EXIT_INPUT)

    def test_attack_writes_decisions(self) -> None:
        save_tensor(torch.rand((3, 8, 8), generator=torch.Generator().manual_seed(1), dtype=torch.float64), self.tmp / "q" / "img.tensor")
        queries = self.tmp / "q" / "queries.jsonl"
        queries.write_text(
            json.dumps({"class": "normal", "id": "n0", "image": "img.tensor", "prompt": "what is this?"}) + "\n",
            encoding="utf-8",
        )
        code = run_command(
            [
                "attack",
                "--manifest", str(self.manifest),
                "--model", str(self.models[0]),
                "--reference", str(self.models[1]),
                "--queries", str(queries),
                "--out", str(self.tmp / "attack"),
            ]
        )
        self.assertEqual(code, EXIT_OK)
        summary = read_json(self.tmp / "attack" / "attack_summary.json")
        self.assertEqual(summary["overall"]["queries"], 1)
        self.assertEqual(list(summary["by_class"]), ["normal"])
        decision = json.loads((self.tmp / "attack" / "decisions.jsonl").read_text(encoding="utf-8").splitlines()[0])
        self.assertEqual(decision["id"], "n0")


if __name__ == "__main__":
    unittest.main()
