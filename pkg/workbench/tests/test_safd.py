from __future__ import annotations

import importlib.util
import math
import tempfile
import unittest
from pathlib import Path

TORCH_AVAILABLE = importlib.util.find_spec("torch") is not None

if TORCH_AVAILABLE:
    import torch

    from sifbench.errors import InvariantViolation, ParameterError, ShapeError, TriggerSpecRejected
    from sifbench.pipeline.bundles import load_trigger, load_triggers, save_trigger
    from sifbench.pipeline.safd import (
        GREEN_MASS_FLOOR,
        DistillConfig,
        LossSpec,
        TriggerSpec,
        check_feasible,
        distill,
        loss_ce,
        loss_wm,
        pgd_step,
        response_logits,
    )
    from sifbench.vlm.model import (
        ModelConfig,
        evaluate_loss,
        forward,
        grad_activations,
        grad_image,
        init_model,
        teacher_forced_input,
    )
    from sifbench.vlm.tokenizer import BYTE_OFFSET, encode
    from sifbench.wmark import GreenMask, WatermarkKey, WatermarkParams, green_list

TINY = {"image_size": 8, "patch_size": 4, "vocab_size": 300, "embed_dim": 16, "layers": 2, "heads": 2}


def make_spec(key, seed: int = 0, trigger_id: str = "t000"):
    gen = torch.Generator().manual_seed(seed)
    base = torch.rand((3, 8, 8), generator=gen, dtype=torch.float64)
    response = [BYTE_OFFSET + 65 + (7 * i + seed) % 26 for i in range(85)]
    return TriggerSpec(base, encode("describe."), key.digest(), response, trigger_id=trigger_id)


@unittest.skipUnless(TORCH_AVAILABLE, "torch is not installed in the test environment.")
class TestProjection(unittest.TestCase):
    def test_step_stays_in_budget_and_range(self) -> None:
        eps = 16 / 255
        base = torch.tensor([[[0.0, 0.01, 0.5, 0.99, 1.0, 0.3]]], dtype=torch.float64)
        current = base.clone()
        for sign in (1.0, -1.0) * 20:
            grad = torch.full_like(base, sign)
            current = pgd_step(current, grad, 1 / 255, base, eps)
            check_feasible(current, base, eps)
            self.assertLessEqual(float((current - base).abs().max()), eps)
            self.assertGreaterEqual(float(current.min()), 0.0)
            self.assertLessEqual(float(current.max()), 1.0)

    def test_saturates_at_budget(self) -> None:
        eps = 16 / 255
        base = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
        current = base.clone()
        for _ in range(40):
            current = pgd_step(current, torch.ones_like(base), 1 / 255, base, eps)
        self.assertLessEqual(float((base - current).max()), eps)
        self.assertAlmostEqual(float((base - current).max()), eps, places=12)

    def test_check_feasible_detects_violations(self) -> None:
        base = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
        with self.assertRaises(InvariantViolation):
            check_feasible(base + 0.2, base, 0.1)
        with self.assertRaises(InvariantViolation):
            check_feasible(torch.full_like(base, 1.05), torch.ones_like(base), 0.1)
        with self.assertRaises(ShapeError):
            pgd_step(base, torch.ones(1, 2, 3, dtype=torch.float64), 0.01, base, 0.1)


@unittest.skipUnless(TORCH_AVAILABLE, "torch is not installed in the test environment.")
class TestLosses(unittest.TestCase):
    def setUp(self) -> None:
        self.params = init_model(1, ModelConfig(**TINY))
        self.key = WatermarkKey.generate(1)
        self.spec = make_spec(self.key)
        tokens = teacher_forced_input(self.spec.prompt, self.spec.teacher_response)
        self.trace = forward(self.params, self.spec.base_image, tokens)

    def test_response_rows(self) -> None:
        rows = response_logits(self.trace, len(self.spec.prompt), len(self.spec.teacher_response))
        self.assertEqual(tuple(rows.shape), (85, 300))
        with self.assertRaises(ShapeError):
            response_logits(self.trace, len(self.spec.prompt), 80)

    def test_green_mass_extremes(self) -> None:
        kwargs = {"prompt_len": len(self.spec.prompt), "response_len": 85}
        all_green = GreenMask(torch.ones(300, dtype=torch.bool))
        all_red = GreenMask(torch.zeros(300, dtype=torch.bool))
        self.assertAlmostEqual(float(loss_wm(self.trace, all_green, 50, **kwargs)), 0.0, places=12)
        self.assertAlmostEqual(float(loss_wm(self.trace, all_red, 50, **kwargs)), -math.log(GREEN_MASS_FLOOR))
        partial = float(loss_wm(self.trace, green_list(self.key, 300, 0.5), 50, **kwargs))
        self.assertGreater(partial, 0.0)

    def test_cross_entropy_matches_manual(self) -> None:
        prompt_len = len(self.spec.prompt)
        value = float(loss_ce(self.trace, self.spec.teacher_response, prompt_len=prompt_len))
        rows = self.trace.logits[prompt_len - 1 : prompt_len - 1 + 85]
        targets = torch.as_tensor(self.spec.teacher_response)
        expected = float(torch.nn.functional.cross_entropy(rows, targets))
        self.assertAlmostEqual(value, expected, places=12)

    def _fd_check(self, loss: "LossSpec", image: "torch.Tensor") -> int:
        prompt, response = self.spec.prompt, self.spec.teacher_response
        step = 1e-5

        def total(img, injected=None) -> float:
            return evaluate_loss(self.params, img, prompt, response, loss, injected=injected, want_image_grad=False).total

        grad = grad_image(self.params, image, prompt, response, loss)
        gen = torch.Generator().manual_seed(11)
        checked = 0
        for flat in torch.randperm(image.numel(), generator=gen)[:12].tolist():
            channel, rest = divmod(flat, 64)
            idx = (channel, *divmod(rest, 8))
            plus, minus = image.clone(), image.clone()
            plus[idx] += step
            minus[idx] -= step
            numeric = (total(plus) - total(minus)) / (2 * step)
            self.assertLessEqual(abs(numeric - float(grad[idx])), 1e-3 * max(1e-6, abs(numeric)) + 1e-9, idx)
            checked += 1

        grads = grad_activations(self.params, image, prompt, response, loss)
        positions = grads.layers[0].shape[0]
        for layer, pos, dim in [(0, 0, 3), (0, 7, 11), (0, positions - 1, 2), (1, 2, 0), (1, 40, 9), (1, positions - 2, 15)]:
            bump = [torch.zeros(positions, 16, dtype=torch.float64) for _ in range(2)]
            bump[layer][pos, dim] = step
            plus = total(image, bump)
            bump[layer][pos, dim] = -step
            minus = total(image, bump)
            numeric = (plus - minus) / (2 * step)
            analytic = float(grads.layers[layer][pos, dim])
            self.assertLessEqual(abs(numeric - analytic), 1e-3 * max(1e-6, abs(numeric)) + 1e-9, (layer, pos, dim))
            checked += 1
        return checked

    def test_distillation_loss_gradients_match_finite_differences(self) -> None:
        mask = green_list(self.key, 300, 0.5)
        image = self.spec.base_image * 0.8 + 0.1
        configs = {
            "wm_only": LossSpec(mask, top_k=300, lambda_wm=1.0, lambda_ce=0.0),
            "ce_only": LossSpec(mask, top_k=50, lambda_wm=0.0, lambda_ce=1.0),
            "mixed": LossSpec(mask, top_k=50, lambda_wm=0.5, lambda_ce=0.5),
        }
        checked = 0
        for name, loss in configs.items():
            with self.subTest(loss=name):
                checked += self._fd_check(loss, image)
        self.assertGreaterEqual(checked, 50)

    def test_zero_weight_loss_has_zero_gradient(self) -> None:
        loss = LossSpec(green_list(self.key, 300, 0.5), top_k=50, lambda_wm=0.0, lambda_ce=0.0)
        prompt, response = self.spec.prompt, self.spec.teacher_response
        grad = grad_image(self.params, self.spec.base_image, prompt, response, loss)
        self.assertTrue(torch.equal(grad, torch.zeros_like(grad)))
        grads = grad_activations(self.params, self.spec.base_image, prompt, response, loss)
        self.assertEqual(grads.global_norm(), 0.0)

    def test_gradient_scales_with_the_loss(self) -> None:
        mask = green_list(self.key, 300, 0.5)
        prompt, response = self.spec.prompt, self.spec.teacher_response
        unit = grad_image(self.params, self.spec.base_image, prompt, response, LossSpec(mask))
        tripled = grad_image(self.params, self.spec.base_image, prompt, response, LossSpec(mask, scale=3.0))
        self.assertTrue(torch.allclose(tripled, 3.0 * unit, rtol=1e-10, atol=0.0))


@unittest.skipUnless(TORCH_AVAILABLE, "torch is not installed in the test environment.")
class TestTriggerSpec(unittest.TestCase):
    def test_short_response_rejected(self) -> None:
        key = WatermarkKey.generate(0)
        with self.assertRaises(TriggerSpecRejected):
            TriggerSpec(torch.zeros(3, 8, 8, dtype=torch.float64), encode("hi"), key.digest(), [5] * 79)
        self.assertTrue(issubclass(TriggerSpecRejected, ValueError))

    def test_config_validation(self) -> None:
        with self.assertRaises(ParameterError):
            DistillConfig(epsilon=0.01, alpha=0.02)
        with self.assertRaises(ParameterError):
            DistillConfig(steps=0)
        with self.assertRaises(ParameterError):
            DistillConfig(lambda_wm=-1.0)


@unittest.skipUnless(TORCH_AVAILABLE, "torch is not installed in the test environment.")
class TestDistill(unittest.TestCase):
    def setUp(self) -> None:
        self.params = init_model(2, ModelConfig(**TINY))
        self.key = WatermarkKey.generate(2)
        self.wparams = WatermarkParams()
        self.spec = make_spec(self.key, seed=3)
        self.cfg = DistillConfig(steps=4, record_every=2)

    def test_short_run_records_history(self) -> None:
        artifact = distill(self.params, self.spec, self.cfg, self.key, self.wparams)
        self.assertEqual([entry["step"] for entry in artifact.history], [0, 2, 4])
        self.assertEqual(set(artifact.initial_losses), {"total", "wm", "ce"})
        self.assertAlmostEqual(
            artifact.initial_losses["total"],
            0.5 * artifact.initial_losses["wm"] + 0.5 * artifact.initial_losses["ce"],
        )
        check_feasible(artifact.trigger_image, self.spec.base_image, self.cfg.epsilon)
        self.assertFalse(torch.equal(artifact.trigger_image, self.spec.base_image))

    def test_deterministic(self) -> None:
        first = distill(self.params, self.spec, self.cfg, self.key, self.wparams)
        second = distill(self.params, self.spec, self.cfg, self.key, self.wparams)
        self.assertTrue(torch.equal(first.trigger_image, second.trigger_image))
        self.assertEqual(first.final_losses, second.final_losses)

    def test_warm_start_must_be_feasible(self) -> None:
        far = (self.spec.base_image + 0.5).clamp(0.0, 1.0)
        with self.assertRaises(InvariantViolation):
            distill(self.params, self.spec, self.cfg, self.key, self.wparams, start=far)

    def test_wrong_key_rejected(self) -> None:
        with self.assertRaises(ParameterError):
            distill(self.params, self.spec, self.cfg, WatermarkKey.generate(99), self.wparams)

    def test_bundle_round_trip(self) -> None:
        artifact = distill(self.params, self.spec, self.cfg, self.key, self.wparams).with_threshold(1.5)
        with tempfile.TemporaryDirectory() as tmp_dir:
            bundle = save_trigger(artifact, Path(tmp_dir), {"manifest_hash": "abc", "tool_version": "0.1.0"})
            loaded = load_trigger(bundle)
            self.assertTrue(torch.equal(loaded.trigger_image, artifact.trigger_image))
            self.assertEqual(loaded.spec.teacher_response, artifact.spec.teacher_response)
            self.assertEqual(loaded.threshold, 1.5)
            self.assertEqual(loaded.distill_config, self.cfg)
            self.assertEqual([t.trigger_id for t in load_triggers(Path(tmp_dir))], ["t000"])
            with self.assertRaises(FileNotFoundError):
                load_triggers(Path(tmp_dir) / "missing")


if __name__ == "__main__":
    unittest.main()
