"""Diffusion schedule, forward process and reverse step tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semvid.channel import make_realization
from semvid.diffusion import (
    SteeringConfig,
    build_schedule,
    find_start_step,
    forward_sample,
    reverse_step_reference,
    steering_term,
)
from semvid.pipeline import OracleNoisePredictor

from conftest import channel_for


class TestBuildSchedule:
    def test_default_abar_end_frozen_value(self, sched_default):
        # frozen from an independent cumulative-product evaluation
        assert sched_default.abar(1000) == pytest.approx(
            4.035829765375676e-5, rel=1e-12)

    def test_single_step(self):
        s = build_schedule(1, 0.1, 0.1)
        assert s.abar(1) == pytest.approx(0.9, rel=1e-12)

    def test_abar_zero_is_one(self, sched_default):
        assert sched_default.abar(0) == 1.0

    def test_abar_strictly_decreasing_and_recursive(self, sched_default):
        ab = sched_default.alpha_bar
        assert np.all(np.diff(ab) < 0)
        np.testing.assert_allclose(
            ab[1:], ab[:-1] * sched_default.alpha, rtol=1e-12)

    def test_invalid_beta_range_rejected(self):
        with pytest.raises(ValueError):
            build_schedule(10, 1e-4, 1.0)
        with pytest.raises(ValueError):
            build_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            build_schedule(0, 1e-4, 0.02)


class TestFindStartStep:
    def test_noiseless_zero(self, sched_default):
        assert find_start_step(0.0, sched_default) == 0

    def test_frozen_values(self, sched_default):
        # frozen from an independent scan of the default schedule
        assert find_start_step(0.1, sched_default) == 93
        assert find_start_step(0.25, sched_default) == 145
        assert find_start_step(1.0, sched_default) == 259

    def test_huge_sigma2_hits_total(self, sched_default):
        assert find_start_step(1e6, sched_default) == 1000

    def test_monotone_in_sigma2(self, sched_default):
        sig = np.linspace(0.0, 5.0, 50)
        ms = [find_start_step(s, sched_default) for s in sig]
        assert all(a <= b for a, b in zip(ms, ms[1:]))

    def test_negative_rejected(self, sched_default):
        with pytest.raises(ValueError):
            find_start_step(-0.1, sched_default)


class TestForwardSample:
    def test_t_zero_identity(self, sched_default):
        chan = channel_for(8, 0.25)
        z = np.arange(8.0)
        np.testing.assert_array_equal(
            forward_sample(z, 0, np.ones(8), chan, sched_default), z)

    def test_zero_eps(self, sched_default):
        chan = channel_for(8, 0.25)
        z = np.arange(8.0)
        out = forward_sample(z, 100, np.zeros(8), chan, sched_default)
        np.testing.assert_allclose(
            out, np.sqrt(sched_default.abar(100)) * z, rtol=1e-12)

    def test_matches_closed_form(self, sched_default):
        rng = np.random.default_rng(3)
        chan = channel_for(8, 0.25, seed=3)
        z = rng.normal(size=8)
        eps = rng.normal(size=8)
        t = 42
        ab = sched_default.abar(t)
        ref = np.sqrt(ab) * z + np.sqrt(1 - ab) * chan.hn * eps
        np.testing.assert_allclose(
            forward_sample(z, t, eps, chan, sched_default), ref, rtol=1e-12)

    def test_out_of_range_t_rejected(self, sched_default):
        chan = channel_for(8, 0.25)
        with pytest.raises(ValueError):
            forward_sample(np.zeros(8), 1001, np.zeros(8), chan, sched_default)


class TestReverseStepReference:
    def test_oracle_undoes_forward(self, sched_default):
        rng = np.random.default_rng(4)
        chan = channel_for(8, 0.25, seed=4)
        z0 = rng.normal(size=8)
        eps = rng.normal(size=8)
        for t in (1, 10, 77):
            z_t = forward_sample(z0, t, eps, chan, sched_default)
            out = reverse_step_reference(
                z_t, t, OracleNoisePredictor(eps), chan, sched_default)
            expect = forward_sample(z0, t - 1, eps, chan, sched_default)
            np.testing.assert_allclose(out, expect, rtol=1e-10, atol=1e-12)

    def test_zero_noise_pure_rescale(self, sched_default):
        chan = channel_for(8, 0.25)
        z = np.arange(1.0, 9.0)
        t = 20
        out = reverse_step_reference(
            z, t, OracleNoisePredictor(np.zeros(8)), chan, sched_default)
        scale = np.sqrt(sched_default.abar(t - 1) / sched_default.abar(t))
        np.testing.assert_allclose(out, scale * z, rtol=1e-12)

    def test_excessive_sigma_t_rejected(self, sched_default):
        chan = channel_for(8, 0.25)
        with pytest.raises(ValueError):
            reverse_step_reference(
                np.zeros(8), 1, OracleNoisePredictor(np.zeros(8)),
                chan, sched_default, sigma_t=1.5)

    def test_telescoping_m50(self, sched_default):
        """Composing oracle reverse steps from t=m down to 1 recovers z0."""
        rng = np.random.default_rng(5)
        chan = channel_for(16, 0.25, seed=5)
        z0 = rng.normal(size=16)
        eps = rng.normal(size=16)
        pred = OracleNoisePredictor(eps)
        for m in (5, 20, 50):
            z = forward_sample(z0, m, eps, chan, sched_default)
            for t in range(m, 0, -1):
                z = reverse_step_reference(z, t, pred, chan, sched_default)
            assert np.linalg.norm(z - z0) <= 1e-5 * np.linalg.norm(z0)

    def test_matches_scalar_ddim_with_unit_hn(self, sched_default):
        """hn = 1 and k = 0 reduce to the standard deterministic DDIM update."""
        chan = make_realization(np.ones(1, dtype=complex), 0.0)
        z = np.array([0.7, -0.2])
        eps = np.array([0.3, 0.1])
        t = 33
        ab_t, ab_p = sched_default.abar(t), sched_default.abar(t - 1)
        # independent scalar DDIM reference
        x0 = (z - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
        ref = np.sqrt(ab_p) * x0 + np.sqrt(1 - ab_p) * eps
        out = reverse_step_reference(
            z, t, OracleNoisePredictor(eps), chan, sched_default)
        np.testing.assert_allclose(out, ref, rtol=1e-12)


class TestSteeringTerm:
    def test_zero_at_anchor(self):
        z = np.arange(4.0)
        cfg = SteeringConfig(k_of_t=lambda t: 0.3)
        np.testing.assert_array_equal(steering_term(z, [z], cfg, 5), 0.0)

    def test_zero_k(self):
        cfg = SteeringConfig(k_of_t=lambda t: 0.0)
        out = steering_term(np.ones(4), [np.zeros(4)], cfg, 5)
        np.testing.assert_array_equal(out, 0.0)

    def test_hand_evaluated_case(self):
        cfg = SteeringConfig(k_of_t=lambda t: 0.3)
        out = steering_term(np.array([1.0, 0.0]), [np.zeros(2)], cfg, 5)
        np.testing.assert_allclose(out, [0.3, 0.0], rtol=1e-12)

    def test_empty_history_rejected(self):
        cfg = SteeringConfig(k_of_t=lambda t: 0.3)
        with pytest.raises(ValueError):
            steering_term(np.ones(4), [], cfg, 5)

    @given(st.floats(0.01, 2.0), st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_linear_in_k_and_difference(self, k, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=8)
        f = rng.normal(size=8)
        base = steering_term(z, [f], SteeringConfig(k_of_t=lambda t: 1.0), 3)
        out = steering_term(z, [f], SteeringConfig(k_of_t=lambda t: k), 3)
        np.testing.assert_allclose(out, k * base, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(base, (2.0 / 8) * (z - f), rtol=1e-12)
