from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from analysis.lens_metrics import (
    LensProfile,
    build_profile,
    cross_entropy_onehot,
    kl_divergence,
    layer_top_tokens,
    onehot,
    profile_delta,
    residual_prediction,
    series_names,
)
from engine import tensor_ops
from engine.checkpoint_io import CheckpointBundle
from engine.model_runtime import forward
from engine.tensor_ops import ContractError
from engine.tokenizer import BpeTokenizer

PROMPT = [2, 7, 1, 8]


def _lens64(bundle: CheckpointBundle, e: np.ndarray) -> np.ndarray:
    x = np.asarray(e, dtype=np.float64)
    g = bundle.ln_f_g.astype(np.float64)
    b = bundle.ln_f_b.astype(np.float64)
    h = (x - x.mean()) / np.sqrt(x.var() + bundle.config.layer_norm_epsilon) * g + b
    return h @ bundle.wte.astype(np.float64).T


def _profile(bundle: CheckpointBundle, gold: int | None = None) -> LensProfile:
    return build_profile(bundle, forward(bundle, PROMPT).trace, gold=gold)


class TestResidualPrediction:
    def test_final_state_gives_output_logits(self, tiny_bundle: CheckpointBundle) -> None:
        result = forward(tiny_bundle, PROMPT)
        assert np.array_equal(residual_prediction(tiny_bundle, result.trace.states[-1]), result.logits)

    def test_matches_reference_projection(self, tiny_bundle: CheckpointBundle) -> None:
        state = forward(tiny_bundle, PROMPT).trace.states[0]
        assert_allclose(residual_prediction(tiny_bundle, state), _lens64(tiny_bundle, state), atol=1e-5)

    def test_nearly_scale_invariant(self, tiny_bundle: CheckpointBundle) -> None:
        state = forward(tiny_bundle, PROMPT).trace.states[1]
        assert_allclose(residual_prediction(tiny_bundle, 2 * state), residual_prediction(tiny_bundle, state), atol=1e-3)

    def test_width_mismatch(self, tiny_bundle: CheckpointBundle) -> None:
        with pytest.raises(ContractError):
            residual_prediction(tiny_bundle, np.ones(3))


class TestCrossEntropy:
    def test_peaked(self) -> None:
        assert cross_entropy_onehot([50.0, 0.0, 0.0], 0) == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self) -> None:
        assert cross_entropy_onehot([0.0] * 4, 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_known_value(self) -> None:
        expected = math.log(sum(math.exp(x) for x in (2, 1, 0, -1))) - 2
        assert cross_entropy_onehot([2.0, 1.0, 0.0, -1.0], 0) == pytest.approx(expected, abs=1e-12)
        assert cross_entropy_onehot([2.0, 1.0, 0.0, -1.0], 0) == pytest.approx(0.4402, abs=1e-4)

    def test_target_out_of_range(self) -> None:
        with pytest.raises(ContractError):
            cross_entropy_onehot([0.0, 1.0], 2)

    def test_onehot_identity_over_random_vectors(self) -> None:
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            size = int(rng.integers(2, 64))
            logits = rng.standard_normal(size) * rng.uniform(0.1, 10)
            target = int(rng.integers(size))
            ce = cross_entropy_onehot(logits, target)
            assert ce >= 0
            assert abs(ce - float(-tensor_ops.log_softmax(logits)[target])) <= 1e-6
            assert ce == kl_divergence(logits, onehot(target, size))


class TestKl:
    def test_same_distribution(self) -> None:
        logits = np.array([0.5, -1.0, 2.0])
        assert kl_divergence(logits, tensor_ops.softmax(logits)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_sum(self) -> None:
        rng = np.random.default_rng(9)
        p = rng.dirichlet(np.ones(6))
        logits = rng.standard_normal(6)
        q = np.exp(logits) / np.exp(logits).sum()
        assert kl_divergence(logits, p) == pytest.approx(float(np.sum(p * np.log(p / q))), abs=1e-9)

    def test_rejects_non_distribution(self) -> None:
        with pytest.raises(ContractError):
            kl_divergence([0.0, 0.0], [0.7, 0.7])


class TestBuildProfile:
    def test_array_lengths(self, tiny_bundle: CheckpointBundle) -> None:
        profile = _profile(tiny_bundle, gold=3)
        for name in series_names():
            assert len(profile.series(name)) == tiny_bundle.config.n_layer + 1
        assert len(profile.top_token) == tiny_bundle.config.n_layer + 1

    def test_final_layer_identities(self, tiny_bundle: CheckpointBundle) -> None:
        result = forward(tiny_bundle, PROMPT)
        profile = build_profile(tiny_bundle, result.trace)
        assert profile.sampled_token == tensor_ops.argmax(result.logits)
        assert profile.output_ce == cross_entropy_onehot(result.logits, profile.sampled_token)
        assert profile.kl_vs_output_logits[-1] <= 1e-6
        assert profile.top_token[-1] == profile.sampled_token
        assert profile.correct is None
        assert profile.ce_vs_gold is None

    def test_correct_generation_has_matching_arrays(self, tiny_bundle: CheckpointBundle) -> None:
        sampled = _profile(tiny_bundle).sampled_token
        profile = _profile(tiny_bundle, gold=sampled)
        assert profile.correct is True
        assert profile.ce_vs_sampled == profile.ce_vs_gold
        assert profile.cosine_vs_sampled_embedding == profile.cosine_vs_gold_embedding

    def test_incorrect_generation(self, tiny_bundle: CheckpointBundle) -> None:
        sampled = _profile(tiny_bundle).sampled_token
        profile = _profile(tiny_bundle, gold=(sampled + 1) % tiny_bundle.config.vocab_size)
        assert profile.correct is False

    def test_matches_brute_force(self, tiny_bundle: CheckpointBundle) -> None:
        trace = forward(tiny_bundle, PROMPT).trace
        profile = build_profile(tiny_bundle, trace, gold=5, keep_logits=True)
        y_hat = profile.sampled_token
        p_out = tensor_ops.softmax(trace.output_logits)
        for i, state in enumerate(trace.states):
            logits = _lens64(tiny_bundle, state)
            log_q = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
            assert profile.ce_vs_sampled[i] == pytest.approx(-log_q[y_hat], abs=1e-4)
            assert profile.ce_vs_gold[i] == pytest.approx(-log_q[5], abs=1e-4)
            assert profile.kl_vs_output_logits[i] == pytest.approx(float(np.sum(p_out * (np.log(p_out) - log_q))), abs=1e-4)
            assert profile.kl_vs_sampled_onehot[i] == profile.ce_vs_sampled[i]
            row = tiny_bundle.wte[y_hat].astype(np.float64)
            cos = float(state @ row / (np.linalg.norm(state) * np.linalg.norm(row)))
            assert profile.cosine_vs_sampled_embedding[i] == pytest.approx(cos, abs=1e-6)
        assert profile.residual_logits is not None
        assert profile.residual_logits.shape == (tiny_bundle.config.n_layer + 1, tiny_bundle.config.vocab_size)

    def test_gold_out_of_range(self, tiny_bundle: CheckpointBundle) -> None:
        with pytest.raises(ContractError):
            _profile(tiny_bundle, gold=tiny_bundle.config.vocab_size)


class TestDelta:
    def test_telescoping(self, tiny_bundle: CheckpointBundle) -> None:
        for gold in range(tiny_bundle.config.vocab_size):
            profile = _profile(tiny_bundle, gold=gold)
            for target, ce in (("gold", profile.ce_vs_gold), ("sampled", profile.ce_vs_sampled)):
                deltas = profile_delta(profile, target)
                assert len(deltas) == tiny_bundle.config.n_layer
                assert sum(deltas) == pytest.approx(ce[-1] - ce[0], abs=1e-5)

    def test_gold_delta_needs_gold(self, tiny_bundle: CheckpointBundle) -> None:
        with pytest.raises(ContractError):
            profile_delta(_profile(tiny_bundle), "gold")


class TestTopTokens:
    def test_decoded_per_layer(self, text_bundle: CheckpointBundle, tokenizer: BpeTokenizer) -> None:
        profile = build_profile(text_bundle, forward(text_bundle, tokenizer.encode("Actions speak")).trace)
        texts = layer_top_tokens(profile, tokenizer)
        assert len(texts) == text_bundle.config.n_layer + 1
        assert texts[-1] == tokenizer.token_text(profile.sampled_token)
