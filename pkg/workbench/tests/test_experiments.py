from __future__ import annotations

import importlib.util
import os
import unittest

TORCH_AVAILABLE = importlib.util.find_spec("torch") is not None
DEPS_AVAILABLE = TORCH_AVAILABLE and all(importlib.util.find_spec(name) is not None for name in ("PIL", "rich", "tqdm"))
SLOW = os.environ.get("SIF_SLOW_TESTS") == "1"

if DEPS_AVAILABLE:
    import numpy as np
    import torch

    from sifbench.errors import ParameterError
    from sifbench.pipeline.corpus import make_sample
    from sifbench.pipeline.experiments import (
        SAMPLING_GRID,
        budget_ablation,
        build_testbed,
        choose_sigma,
        forge_and_calibrate,
        heldout_reliability,
        null_z_statistics,
        pilot_noise_sigma,
        quantization_ordering,
        rfo_benefit,
        rho_sweep,
        sampling_robustness,
        sda_separation,
        step_ablation,
        watermark_signal_rate,
    )
    from sifbench.pipeline.mutate import MutationSpec
    from sifbench.pipeline.safd import DistillConfig, TriggerArtifact, TriggerSpec
    from sifbench.pipeline.sda import SdaConfig
    from sifbench.vlm.decoding import DecodeConfig, decode
    from sifbench.vlm.model import ModelConfig, init_model
    from sifbench.vlm.tokenizer import BYTE_OFFSET, decode as detokenize, encode
    from sifbench.wmark import WatermarkKey, WatermarkParams

TINY = {"image_size": 8, "patch_size": 4, "vocab_size": 300, "embed_dim": 16, "layers": 2, "heads": 2}


@unittest.skipUnless(DEPS_AVAILABLE, "Workbench dependencies are not installed in the test environment.")
class TestNullStatistics(unittest.TestCase):
    def test_unwatermarked_sequences_look_standard_normal(self) -> None:
        report = null_z_statistics(sequences=10_000, length=200, seed=0)
        self.assertEqual(report["sequences"], 10_000)
        self.assertLessEqual(abs(report["mean"]), 0.1)
        self.assertGreaterEqual(report["std"], 0.9)
        self.assertLessEqual(report["std"], 1.1)


@unittest.skipUnless(DEPS_AVAILABLE, "Workbench dependencies are not installed in the test environment.")
class TestNoisePilot(unittest.TestCase):
    def test_first_sigma_inside_the_band(self) -> None:
        rows = [
            {"sigma": 0.05, "fmr": 0.1},
            {"sigma": 0.002, "fmr": 1.0},
            {"sigma": 0.01, "fmr": 0.6},
            {"sigma": 0.005, "fmr": 0.85},
            {"sigma": 0.02, "fmr": 0.3},
        ]
        self.assertEqual(choose_sigma(rows), 0.01)

    def test_band_edges_are_excluded(self) -> None:
        rows = [{"sigma": 0.002, "fmr": 0.8}, {"sigma": 0.005, "fmr": 0.0}]
        self.assertEqual(choose_sigma(rows), 0.002)
        self.assertEqual(choose_sigma(rows, band=(0.1, 0.9)), 0.002)

    def test_falls_back_to_nearest_middle(self) -> None:
        rows = [{"sigma": 0.002, "fmr": 1.0}, {"sigma": 0.01, "fmr": 0.9}, {"sigma": 0.1, "fmr": 0.0}]
        self.assertEqual(choose_sigma(rows), 0.01)
        with self.assertRaises(ParameterError):
            choose_sigma([])

    def test_sampling_grid(self) -> None:
        self.assertEqual(len(SAMPLING_GRID), 10)
        self.assertEqual(len(set(SAMPLING_GRID)), 10)
        for temperature, top_p in SAMPLING_GRID:
            DecodeConfig("sample", temperature=temperature, top_p=top_p)


@unittest.skipUnless(DEPS_AVAILABLE, "Workbench dependencies are not installed in the test environment.")
class TestAblations(unittest.TestCase):
    def test_step_ablation_averages_history(self) -> None:
        key = WatermarkKey.generate(0)
        spec = TriggerSpec(torch.zeros(3, 8, 8, dtype=torch.float64), encode("hi there"), key.digest(), [BYTE_OFFSET + 65] * 80)
        histories = [
            [{"step": 0, "total": 2.0, "wm": 1.0, "ce": 3.0}, {"step": 5, "total": 1.0, "wm": 0.5, "ce": 1.5}],
            [{"step": 0, "total": 4.0, "wm": 3.0, "ce": 5.0}, {"step": 5, "total": 3.0, "wm": 2.5, "ce": 3.5}],
        ]
        artifacts = [
            TriggerArtifact(spec.base_image, spec, DistillConfig(steps=5), {}, {}, history=h) for h in histories
        ]
        report = step_ablation(artifacts)
        self.assertEqual(report["triggers"], 2)
        self.assertEqual(report["rows"][0], {"step": 0, "total": 3.0, "wm": 2.0, "ce": 4.0})
        self.assertEqual(report["rows"][1]["step"], 5)

    def test_budgets_must_increase(self) -> None:
        params = init_model(0, ModelConfig(**TINY))
        with self.assertRaises(ParameterError):
            budget_ablation(params, [], [0.1, 0.05], DistillConfig(), WatermarkKey.generate(0), WatermarkParams())

    def test_rho_sweep_rejects_bad_radii(self) -> None:
        with self.assertRaises(ParameterError):
            rho_sweep([], DistillConfig(), WatermarkParams())


@unittest.skipUnless(DEPS_AVAILABLE and SLOW, "Set SIF_SLOW_TESTS=1 to run the desk-scale experiments.")
class TestExperimentWiring(unittest.TestCase):
    """Every experiment runs end to end on a tiny, barely trained testbed."""

    @classmethod
    def setUpClass(cls) -> None:
        cls.decode_cfg = DecodeConfig(max_len=100)
        cls.bed = build_testbed(
            5,
            ModelConfig(**TINY),
            unrelated_count=2,
            trigger_count=2,
            pretrain_steps=20,
            min_teacher_gain=None,
            decode_cfg=cls.decode_cfg,
        )
        cls.cfg = DistillConfig(steps=4, record_every=2)
        cls.wparams = WatermarkParams()
        cls.artifacts, cls.table = forge_and_calibrate(cls.bed, cls.cfg, cls.wparams, cls.decode_cfg)

    def test_reliability_and_orderings(self) -> None:
        self.assertEqual(len(self.artifacts), 2)
        reliability = heldout_reliability(self.bed, self.artifacts, self.table, self.wparams, decode_cfg=self.decode_cfg)
        self.assertEqual(reliability["calibration_fmr"], [0.0, 0.0])
        self.assertIn("owner_fmr", reliability)
        ordering = quantization_ordering([self.bed], self.cfg, self.wparams, decode_cfg=self.decode_cfg)
        self.assertIn("ordered", ordering)

    def test_noise_experiments(self) -> None:
        pilot = pilot_noise_sigma(
            self.bed, self.artifacts, self.table, self.wparams, sigmas=(0.01, 0.1), decode_cfg=self.decode_cfg
        )
        self.assertIn(pilot["sigma"], (0.01, 0.1))
        benefit = rfo_benefit([self.bed], self.cfg, self.wparams, rho=0.5, decode_cfg=self.decode_cfg)
        self.assertEqual(benefit["sign"], int(np.sign(benefit["mean_difference"])))
        self.assertEqual(len(benefit["rows"]), 1)
        self.assertIsNotNone(benefit["pilot"])
        noise = MutationSpec("weight_noise", {"sigma": 0.05})
        sweep = rho_sweep([self.bed], self.cfg, self.wparams, rhos=(0.0, 0.5), noise=noise, decode_cfg=self.decode_cfg)
        self.assertEqual([row["rho"] for row in sweep["rows"]], [0.0, 0.5])
        self.assertIsNone(sweep["pilot"])

    def test_sampling_and_gateway(self) -> None:
        sampled = sampling_robustness(
            self.bed, self.artifacts, self.table, self.wparams, grid=SAMPLING_GRID[:2], max_len=100
        )
        self.assertEqual(len(sampled["rows"]), 2)
        separation = sda_separation(
            self.bed.owner,
            self.bed.heldout,
            self.artifacts,
            SdaConfig(),
            normal_queries=3,
            gibberish_queries=2,
            decode_cfg=self.decode_cfg,
        )
        for name in ("fixed_phrase_flag_rate", "gibberish_flag_rate", "normal_false_positive_rate", "safd_flag_rate"):
            self.assertGreaterEqual(separation[name], 0.0)
            self.assertLessEqual(separation[name], 1.0)


_BEDS: dict[int, object] = {}
_FORGED: dict[int, tuple] = {}
ACCEPTANCE_SEEDS = (0, 1, 2, 3, 4)


def _bed(seed: int):
    if seed not in _BEDS:
        _BEDS[seed] = build_testbed(seed, ModelConfig(), concurrency=4)
    return _BEDS[seed]


def _forged(seed: int):
    if seed not in _FORGED:
        _FORGED[seed] = forge_and_calibrate(_bed(seed), DistillConfig(), WatermarkParams(), concurrency=4)
    return _FORGED[seed]


@unittest.skipUnless(DEPS_AVAILABLE and SLOW, "Set SIF_SLOW_TESTS=1 to run the desk-scale experiments.")
class TestDeskAcceptance(unittest.TestCase):
    """Desk-scale thresholds on the default 32px model and full distillation budget."""

    def test_watermark_signal_rate(self) -> None:
        report = watermark_signal_rate(models=100, seed=0, concurrency=4)
        self.assertGreaterEqual(report["rate"], 0.95)

    def test_pretrained_models_read_the_image_and_agree(self) -> None:
        bed = _bed(0)
        cfg = DecodeConfig()
        agree = 0
        for index in range(20):
            sample = make_sample(77, index, stream="held-scenes")
            prompt = encode(sample.prompt)
            caption = detokenize(decode(bed.owner, sample.image, prompt, cfg))
            self.assertIn(f" {sample.scene.color} ", caption)
            self.assertIn(f" is {sample.scene.background}.", caption)
            agree += caption == detokenize(decode(bed.heldout, sample.image, prompt, cfg))
        self.assertGreaterEqual(agree, 18)

    def test_distillation_moves_the_owner(self) -> None:
        artifacts, _ = _forged(0)
        self.assertEqual(len(artifacts), 20)
        improved = sum(a.final_z is not None and a.initial_z is not None and a.final_z > a.initial_z for a in artifacts)
        exceeded = sum(
            a.final_z is not None and a.threshold is not None and a.final_z > a.threshold for a in artifacts
        )
        self.assertGreaterEqual(improved / 20, 0.9)
        self.assertGreaterEqual(exceeded / 20, 0.8)

    def test_owner_and_heldout_are_separated(self) -> None:
        artifacts, table = _forged(0)
        reliability = heldout_reliability(_bed(0), artifacts, table, WatermarkParams(), concurrency=4)
        self.assertEqual(reliability["calibration_fmr"], [0.0] * len(_bed(0).unrelated))
        self.assertLessEqual(reliability["heldout_fmr"], 0.05)
        self.assertGreaterEqual(reliability["owner_fmr"], 0.8)

    def test_rfo_does_not_hurt_under_weight_noise(self) -> None:
        beds = [_bed(seed) for seed in ACCEPTANCE_SEEDS]
        report = rfo_benefit(beds, DistillConfig(), WatermarkParams(), concurrency=4)
        lo, hi = report["pilot"]["band"]
        self.assertTrue(any(lo < row["fmr"] < hi for row in report["pilot"]["rows"]))
        self.assertGreaterEqual(report["mean_difference"], 0.0)

    def test_quantization_ordering(self) -> None:
        beds = [_bed(seed) for seed in ACCEPTANCE_SEEDS]
        report = quantization_ordering(beds, DistillConfig(), WatermarkParams(), concurrency=4)
        self.assertTrue(report["ordered"])

    def test_gateway_separation(self) -> None:
        artifacts, _ = _forged(0)
        bed = _bed(0)
        report = sda_separation(bed.owner, bed.heldout, artifacts, SdaConfig(), concurrency=4)
        self.assertGreaterEqual(report["fixed_phrase_flag_rate"], 0.9)
        self.assertLessEqual(report["safd_flag_rate"], 0.2)
        self.assertLess(report["normal_false_positive_rate"], 0.05)


if __name__ == "__main__":
    unittest.main()
