from __future__ import annotations

import importlib.util
import unittest

TORCH_AVAILABLE = importlib.util.find_spec("torch") is not None

if TORCH_AVAILABLE:
    import torch

    from sifbench.errors import DegenerateInputError, ParameterError
    from sifbench.pipeline.corpus import default_stopwords
    from sifbench.pipeline.sda import (
        FixedPhraseResponder,
        SdaConfig,
        jaccard_nonstop,
        sda_serve,
        semantic_sim,
        serve_all,
        summarize,
    )
    from sifbench.vlm.decoding import DecodeConfig, decode
    from sifbench.vlm.model import ModelConfig, init_model
    from sifbench.vlm.tokenizer import encode

TINY = {"image_size": 8, "patch_size": 4, "vocab_size": 300, "embed_dim": 16, "layers": 2, "heads": 2}
DECODE = None if not TORCH_AVAILABLE else DecodeConfig(max_len=24)


def _image(seed: int) -> "torch.Tensor":
    return torch.rand((3, 8, 8), generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class _Disjoint:
    """Responder whose answer shares no token with ``avoid``."""

    def __init__(self, avoid):
        self.tokens = [t for t in range(2, 300) if t not in set(avoid)][:12]

    def respond(self, image, prompt, decode_cfg):
        return list(self.tokens)


class _Reversed:
    def __init__(self, params):
        self.params = params

    def respond(self, image, prompt, decode_cfg):
        return list(reversed(decode(self.params, image, prompt, decode_cfg)))


class _Padded:
    """Responder that appends fixed tokens to a model's own answer."""

    def __init__(self, params, extra):
        self.params = params
        self.extra = list(extra)

    def respond(self, image, prompt, decode_cfg):
        return decode(self.params, image, prompt, decode_cfg) + self.extra


@unittest.skipUnless(TORCH_AVAILABLE, "torch is not installed in the test environment.")
class TestSimilarity(unittest.TestCase):
    def test_jaccard(self) -> None:
        self.assertEqual(jaccard_nonstop([5, 6], [5, 6], []), 1.0)
        self.assertEqual(jaccard_nonstop([5, 6], [7, 8], []), 0.0)
        self.assertEqual(jaccard_nonstop([5, 6], [6, 7], []), 1 / 3)
        self.assertEqual(jaccard_nonstop([5], [6], [5, 6]), 1.0)

    def test_semantic_similarity_ignores_order(self) -> None:
        params = init_model(0, ModelConfig(**TINY))
        a = [10, 20, 30, 40, 55]
        self.assertEqual(semantic_sim(a, list(reversed(a)), params), semantic_sim(a, a, params))
        self.assertAlmostEqual(semantic_sim(a, a, params), 1.0, places=12)
        with self.assertRaises(DegenerateInputError):
            semantic_sim([], a, params)

    def test_default_stopwords_cover_caption_alphabet(self) -> None:
        stop = default_stopwords()
        self.assertLessEqual(len(stop), 32)
        self.assertIn(encode(" ")[0], stop)
        self.assertIn(encode("e")[0], stop)
        self.assertNotIn(encode("C")[0], stop)

    def test_config_validation(self) -> None:
        with self.assertRaises(ParameterError):
            SdaConfig(ppl_threshold=0.0)
        with self.assertRaises(ParameterError):
            SdaConfig(jaccard_threshold=1.5)
        self.assertFalse(SdaConfig().semantic_enabled)
        self.assertTrue(SdaConfig(sem_threshold=0.2).semantic_enabled)


@unittest.skipUnless(TORCH_AVAILABLE, "torch is not installed in the test environment.")
class TestGateway(unittest.TestCase):
    def setUp(self) -> None:
        config = ModelConfig(**TINY)
        self.stolen = init_model(1, config)
        self.reference = init_model(2, config)
        self.image = _image(0)
        self.prompt = encode("describe the scene.")

    def test_perplexity_gate_serves_reference(self) -> None:
        cfg = SdaConfig(ppl_threshold=1e-6, stopword_ids=[])
        decision = sda_serve(self.stolen, self.reference, self.image, self.prompt, cfg, DECODE)
        self.assertTrue(decision.flagged)
        self.assertEqual(decision.reason, "ppl_gate")
        self.assertEqual(decision.served_response, decision.reference_response)
        self.assertIsNone(decision.jaccard)

    def test_identical_models_pass(self) -> None:
        cfg = SdaConfig(ppl_threshold=1e12, stopword_ids=[])
        decision = sda_serve(self.reference, self.reference, self.image, self.prompt, cfg, DECODE)
        self.assertFalse(decision.flagged)
        self.assertEqual(decision.reason, "none")
        self.assertEqual(decision.served_response, decision.stolen_response)
        self.assertEqual(decision.jaccard, 1.0)

    def test_lexical_divergence(self) -> None:
        reference_response = decode(self.reference, self.image, self.prompt, DECODE)
        cfg = SdaConfig(ppl_threshold=1e12, jaccard_threshold=0.1, stopword_ids=[])
        decision = sda_serve(_Disjoint(reference_response), self.reference, self.image, self.prompt, cfg, DECODE)
        self.assertTrue(decision.flagged)
        self.assertEqual(decision.reason, "lexical_divergence")
        self.assertEqual(decision.jaccard, 0.0)
        self.assertEqual(decision.served_response, reference_response)

    def test_semantic_check_runs_only_when_enabled(self) -> None:
        cfg = SdaConfig(ppl_threshold=1e12, jaccard_threshold=0.1, sem_threshold=0.5, stopword_ids=[])
        decision = sda_serve(_Reversed(self.reference), self.reference, self.image, self.prompt, cfg, DECODE)
        if decision.reference_response:
            self.assertEqual(decision.reason, "none")
            self.assertIsNotNone(decision.sem_sim)
        off = sda_serve(_Reversed(self.reference), self.reference, self.image, self.prompt, SdaConfig(ppl_threshold=1e12), DECODE)
        self.assertIsNone(off.sem_sim)

    def _padded_case(self):
        responder = _Padded(self.reference, [250, 251, 252])
        reference_response = decode(self.reference, self.image, self.prompt, DECODE)
        if not reference_response:
            self.skipTest("Reference model ended its answer immediately.")
        padded = responder.respond(self.image, self.prompt, DECODE)
        return responder, semantic_sim(padded, reference_response, self.reference)

    def test_semantic_divergence_flag(self) -> None:
        responder, sem = self._padded_case()
        self.assertLess(sem, 1.0)
        strict = SdaConfig(ppl_threshold=1e12, jaccard_threshold=0.0, sem_threshold=min(1.0, sem + 1e-9), stopword_ids=[])
        decision = sda_serve(responder, self.reference, self.image, self.prompt, strict, DECODE)
        self.assertTrue(decision.flagged)
        self.assertEqual(decision.reason, "semantic_divergence")
        self.assertAlmostEqual(decision.sem_sim, sem, places=12)
        self.assertEqual(decision.served_response, decision.reference_response)
        loose = SdaConfig(ppl_threshold=1e12, jaccard_threshold=0.0, sem_threshold=max(1e-6, sem - 1e-9), stopword_ids=[])
        decision = sda_serve(responder, self.reference, self.image, self.prompt, loose, DECODE)
        self.assertFalse(decision.flagged)
        self.assertEqual(decision.served_response, decision.stolen_response)

    def test_raising_thresholds_never_unflags(self) -> None:
        responder, sem = self._padded_case()
        sem_steps = [0.0, sem / 2, max(0.0, sem - 1e-9), min(1.0, sem + 1e-9), 1.0]
        flags = [
            sda_serve(
                responder,
                self.reference,
                self.image,
                self.prompt,
                SdaConfig(ppl_threshold=1e12, jaccard_threshold=0.0, sem_threshold=s, stopword_ids=[]),
                DECODE,
            ).flagged
            for s in sem_steps
        ]
        self.assertEqual(flags, sorted(flags))
        jaccard_steps = [0.0, 0.1, 0.5, 0.9, 1.0]
        flags = [
            sda_serve(
                responder,
                self.reference,
                self.image,
                self.prompt,
                SdaConfig(ppl_threshold=1e12, jaccard_threshold=j, stopword_ids=[]),
                DECODE,
            ).flagged
            for j in jaccard_steps
        ]
        self.assertEqual(flags, sorted(flags))
        self.assertTrue(flags[-1])

    def test_fixed_phrase_responder(self) -> None:
        trigger = _image(5)
        responder = FixedPhraseResponder.for_images(self.stolen, [trigger], "OWNER MARK")
        self.assertEqual(responder.respond(trigger, self.prompt, DECODE), encode("OWNER MARK"))
        self.assertEqual(
            responder.respond(self.image, self.prompt, DECODE), decode(self.stolen, self.image, self.prompt, DECODE)
        )

    def test_short_prompt_rejected(self) -> None:
        with self.assertRaises(DegenerateInputError):
            sda_serve(self.stolen, self.reference, self.image, [5], SdaConfig(), DECODE)

    def test_serve_all_keeps_order_and_summarizes(self) -> None:
        queries = [(_image(i), encode(p)) for i, p in enumerate(["what is this?", "describe.", "tell me."])]
        cfg = SdaConfig(ppl_threshold=1e12, stopword_ids=[])
        decisions = serve_all(self.stolen, self.reference, queries, cfg, DECODE, concurrency=3)
        single = [sda_serve(self.stolen, self.reference, img, prompt, cfg, DECODE) for img, prompt in queries]
        self.assertEqual([d.to_dict() for d in decisions], [d.to_dict() for d in single])
        summary = summarize(decisions)
        self.assertEqual(summary["queries"], 3)
        self.assertEqual(sum(summary["by_reason"].values()), 3)
        self.assertEqual(summary["flagged"], sum(d.flagged for d in decisions))
        with self.assertRaises(ParameterError):
            serve_all(self.stolen, self.reference, [], cfg, DECODE)


if __name__ == "__main__":
    unittest.main()
