"""Decoupled diffusion multi-frame compensation tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semvid.channel import make_realization, sample_rayleigh
from semvid.ddmfc import (
    CompensationParams,
    combine_noise,
    compose_p_frame,
    ddmfc_sample,
    final_step,
    remove_base_noise,
    reverse_step_p,
    run_base_chain,
    start_point,
)
from semvid.diffusion import build_schedule, forward_sample, reverse_step_reference
from semvid.pipeline import OracleNoisePredictor

from conftest import channel_for


def oracle_setup(m, lam, length=64, seed=0):
    """Channel + frames where abar_m = 1/(1+sigma2) exactly (exact start match)."""
    sched = build_schedule(1000, 1e-4, 0.02)
    sigma2 = 1.0 / sched.abar(m) - 1.0
    rng = np.random.default_rng(seed)
    chan = make_realization(sample_rayleigh(rng, length // 2), sigma2)
    f_ref = rng.normal(size=length)
    r = rng.normal(size=length)
    n_ref = rng.normal(0.0, np.sqrt(sigma2), length)
    n_r = rng.normal(0.0, np.sqrt(sigma2), length)
    f_ref_rx = chan.hs * f_ref + chan.hn * n_ref
    r_rx = chan.hs * r + chan.hn * n_r
    params = CompensationParams(
        lambda_i=lam, k_of_t=lambda t: 0.0, sigma_t=0.0, start_step=m)
    return sched, chan, sigma2, f_ref, r, f_ref_rx, r_rx, n_ref, n_r, params


class TestCompensationParams:
    def test_invalid_lambda_rejected(self):
        with pytest.raises(ValueError):
            CompensationParams(lambda_i=1.5)

    def test_negative_sigma_t_rejected(self):
        with pytest.raises(ValueError):
            CompensationParams(sigma_t=-0.1)

    def test_negative_start_step_rejected(self):
        with pytest.raises(ValueError):
            CompensationParams(start_step=-1)


class TestComposePFrame:
    def test_lambda_one(self):
        f, r = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        np.testing.assert_array_equal(compose_p_frame(f, r, 1.0), f)

    def test_lambda_zero(self):
        f, r = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        np.testing.assert_array_equal(compose_p_frame(f, r, 0.0), r)

    def test_hand_evaluated_default_lambda(self):
        out = compose_p_frame(np.array([1.0, 1.0]), np.array([0.0, 2.0]), 0.7)
        np.testing.assert_allclose(
            out, [np.sqrt(0.7), np.sqrt(0.7) + 2 * np.sqrt(0.3)], rtol=1e-12)
        np.testing.assert_allclose(out, [0.83666003, 1.93210514], atol=5e-9)

    def test_invalid_lambda_rejected(self):
        with pytest.raises(ValueError):
            compose_p_frame(np.zeros(2), np.zeros(2), -0.1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compose_p_frame(np.zeros(2), np.zeros(3), 0.5)


class TestStartPoint:
    def test_noiseless_no_normalization(self):
        f, r = np.arange(4.0), np.arange(4.0)[::-1].copy()
        np.testing.assert_array_equal(
            start_point(f, r, 0.7, 0.0), compose_p_frame(f, r, 0.7))

    def test_quarter_variance_scale(self):
        f, r = np.ones(4), np.zeros(4)
        out = start_point(f, r, 1.0, 0.25)
        np.testing.assert_allclose(out, 0.8944271909999159, rtol=1e-12)


class TestCombineNoise:
    def test_lambda_one(self):
        e, p = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        np.testing.assert_array_equal(combine_noise(e, p, 1.0), e)

    def test_hand_evaluated(self):
        out = combine_noise(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.7)
        np.testing.assert_allclose(out, [np.sqrt(0.7), np.sqrt(0.3)], rtol=1e-12)

    @given(st.floats(0.0, 1.0), st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_pythagoras_on_orthogonal_inputs(self, lam, seed):
        rng = np.random.default_rng(seed)
        e = np.zeros(8)
        p = np.zeros(8)
        e[:4] = rng.normal(size=4)
        p[4:] = rng.normal(size=4)
        c = combine_noise(e, p, lam)
        assert np.sum(c**2) == pytest.approx(
            lam * np.sum(e**2) + (1 - lam) * np.sum(p**2), rel=1e-9, abs=1e-12)


class TestRemoveBaseNoise:
    def test_lambda_zero_identity(self, sched_default):
        chan = channel_for(8, 0.25)
        z = np.arange(8.0)
        np.testing.assert_array_equal(
            remove_base_noise(z, np.ones(8), 0.0, 5, sched_default, chan), z)

    def test_zero_eps_identity(self, sched_default):
        chan = channel_for(8, 0.25)
        z = np.arange(8.0)
        np.testing.assert_array_equal(
            remove_base_noise(z, np.zeros(8), 0.7, 5, sched_default, chan), z)

    def test_strips_exactly_the_base_share(self, sched_default):
        """Forward-composed z_t minus base noise = signal + residual-noise share."""
        rng = np.random.default_rng(6)
        chan = channel_for(8, 0.25, seed=6)
        f_ref, r = rng.normal(size=8), rng.normal(size=8)
        eps_ref, phi = rng.normal(size=8), rng.normal(size=8)
        lam, t = 0.7, 40
        f_p = compose_p_frame(f_ref, r, lam)
        z_t = forward_sample(f_p, t, combine_noise(eps_ref, phi, lam),
                             chan, sched_default)
        z_prime = remove_base_noise(z_t, eps_ref, lam, t, sched_default, chan)
        ab = sched_default.abar(t)
        expect = (np.sqrt(ab) * f_p
                  + np.sqrt(1 - lam) * np.sqrt(1 - ab) * chan.hn * phi)
        np.testing.assert_allclose(z_prime, expect, rtol=1e-12, atol=1e-12)


class TestDecompositionIdentity:
    def test_thousand_random_cases(self, sched_default):
        """Composite forward = sqrt(lam) ref-forward + sqrt(1-lam) res-forward."""
        rng = np.random.default_rng(7)
        chan = channel_for(64, 0.25, seed=7)
        for _ in range(1000):
            lam = float(rng.uniform(0, 1))
            t = int(rng.integers(1, 1001))
            f_ref, r = rng.normal(size=64), rng.normal(size=64)
            eps_ref, phi = rng.normal(size=64), rng.normal(size=64)
            lhs = forward_sample(
                compose_p_frame(f_ref, r, lam), t,
                combine_noise(eps_ref, phi, lam), chan, sched_default)
            rhs = (np.sqrt(lam) * forward_sample(f_ref, t, eps_ref, chan, sched_default)
                   + np.sqrt(1 - lam) * forward_sample(r, t, phi, chan, sched_default))
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


class TestReverseStepP:
    def test_lambda_one_matches_reference_step(self, sched_default):
        rng = np.random.default_rng(8)
        chan = channel_for(8, 0.25, seed=8)
        z = rng.normal(size=8)
        eps_ref = rng.normal(size=8)
        params = CompensationParams(lambda_i=1.0, k_of_t=lambda t: 0.0,
                                    sigma_t=0.0, start_step=10)
        pred = OracleNoisePredictor(rng.normal(size=8))
        out = reverse_step_p(z, z, eps_ref, pred, [], params, 5,
                             sched_default, chan)
        ref = reverse_step_reference(
            z, 5, OracleNoisePredictor(eps_ref), chan, sched_default)
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_steering_delta_is_exactly_k_term(self, sched_default):
        rng = np.random.default_rng(9)
        chan = channel_for(8, 0.25, seed=9)
        z = rng.normal(size=8)
        prev = [rng.normal(size=8)]
        eps_ref = rng.normal(size=8)
        pred = OracleNoisePredictor(rng.normal(size=8))
        mk = lambda k: CompensationParams(
            lambda_i=0.7, k_of_t=lambda t: k, sigma_t=0.0, start_step=10)
        with_k = reverse_step_p(z, z, eps_ref, pred, prev, mk(0.3), 5,
                                sched_default, chan)
        without = reverse_step_p(z, z, eps_ref, pred, prev, mk(0.0), 5,
                                 sched_default, chan)
        np.testing.assert_allclose(
            without - with_k, 0.3 * (2.0 / 8) * (z - prev[0]),
            rtol=1e-12, atol=1e-12)


class TestFinalStep:
    def test_zero_noise(self, sched_default):
        chan = channel_for(8, 0.25)
        z1 = np.arange(8.0)
        params = CompensationParams(lambda_i=0.7, k_of_t=lambda t: 0.0,
                                    sigma_t=0.0, start_step=10)
        pred = OracleNoisePredictor(np.zeros(8))
        out = final_step(z1, z1, np.zeros(8), pred, [], params,
                         sched_default, chan)
        np.testing.assert_allclose(out, z1 / np.sqrt(sched_default.abar(1)),
                                   rtol=1e-12)

    def test_oracle_inverts_single_forward(self, sched_default):
        rng = np.random.default_rng(10)
        chan = channel_for(8, 0.25, seed=10)
        z0 = rng.normal(size=8)
        eps_ref, phi = rng.normal(size=8), rng.normal(size=8)
        lam = 0.7
        eps_tot = combine_noise(eps_ref, phi, lam)
        z1 = forward_sample(z0, 1, eps_tot, chan, sched_default)
        params = CompensationParams(lambda_i=lam, k_of_t=lambda t: 0.0,
                                    sigma_t=0.0, start_step=1)
        out = final_step(z1, z1, eps_ref, OracleNoisePredictor(phi), [],
                         params, sched_default, chan)
        np.testing.assert_allclose(out, z0, rtol=1e-10, atol=1e-12)


class TestDdmfcSample:
    def test_m_zero_returns_start_point(self, sched_default):
        chan = channel_for(8, 0.0)
        f_ref, r = np.arange(8.0), np.ones(8)
        params = CompensationParams(lambda_i=0.7, k_of_t=lambda t: 0.3,
                                    sigma_t=0.0, start_step=0)
        out, trace = ddmfc_sample(
            f_ref, r, [], OracleNoisePredictor(np.zeros(8)),
            OracleNoisePredictor(np.zeros(8)), params, sched_default, chan)
        np.testing.assert_array_equal(out, start_point(f_ref, r, 0.7, 0.0))
        assert len(trace) == 0

    @pytest.mark.parametrize("m", [1, 5, 10])
    @pytest.mark.parametrize("lam", [0.0, 0.7, 1.0])
    def test_oracle_round_trip(self, m, lam):
        (sched, chan, sigma2, f_ref, r, f_ref_rx, r_rx,
         n_ref, n_r, params) = oracle_setup(m, lam)
        base = OracleNoisePredictor(n_ref / np.sqrt(sigma2))
        res = OracleNoisePredictor(n_r / np.sqrt(sigma2))
        out, trace = ddmfc_sample(f_ref_rx, r_rx, [], base, res,
                                  params, sched, chan)
        z_s = chan.hs * compose_p_frame(f_ref, r, lam)
        assert np.linalg.norm(out - z_s) <= 1e-5 * np.linalg.norm(z_s)
        assert trace.t == list(range(m, 0, -1))

    def test_trace_step_count_and_records(self):
        (sched, chan, sigma2, _, _, f_ref_rx, r_rx,
         n_ref, n_r, params) = oracle_setup(10, 0.7)
        base = OracleNoisePredictor(n_ref / np.sqrt(sigma2))
        res = OracleNoisePredictor(n_r / np.sqrt(sigma2))
        _, trace = ddmfc_sample(f_ref_rx, r_rx, [f_ref_rx], base, res,
                                params, sched, chan, record_trace=True)
        assert len(trace) == 10
        assert trace.t == list(range(10, 0, -1))
        assert all(z.shape == f_ref_rx.shape for z in trace.z_t)

    def test_base_predictor_called_exactly_m_times_per_gop(self):
        """Base-noise cache is shared: m calls total, independent of P count."""
        (sched, chan, sigma2, _, _, f_ref_rx, r_rx,
         n_ref, n_r, params) = oracle_setup(10, 0.7)
        base = OracleNoisePredictor(n_ref / np.sqrt(sigma2))
        res = OracleNoisePredictor(n_r / np.sqrt(sigma2))
        cache = run_base_chain(f_ref_rx, base, params, sched, chan)
        assert base.calls == 10
        for _ in range(5):   # five P frames reuse the cache
            ddmfc_sample(f_ref_rx, r_rx, [f_ref_rx], base, res, params,
                         sched, chan, base_cache=cache)
        assert base.calls == 10

    def test_continuity_in_lambda(self):
        """No jumps: output changes smoothly along a fine lambda grid."""
        (sched, chan, sigma2, _, _, f_ref_rx, r_rx,
         n_ref, n_r, _) = oracle_setup(5, 0.5, seed=11)
        base = OracleNoisePredictor(n_ref / np.sqrt(sigma2))
        res = OracleNoisePredictor(n_r / np.sqrt(sigma2))
        lams = np.linspace(0.05, 0.95, 31)
        outs = []
        for lam in lams:
            p = CompensationParams(lambda_i=float(lam), k_of_t=lambda t: 0.3,
                                   sigma_t=0.0, start_step=5)
            out, _ = ddmfc_sample(f_ref_rx, r_rx, [f_ref_rx], base, res,
                                  p, sched, chan)
            outs.append(out)
        deltas = [np.linalg.norm(b - a) for a, b in zip(outs, outs[1:])]
        med = np.median(deltas)
        assert max(deltas) < 10 * med

    def test_deterministic_given_inputs(self):
        (sched, chan, sigma2, _, _, f_ref_rx, r_rx,
         n_ref, n_r, params) = oracle_setup(10, 0.7)
        base = OracleNoisePredictor(n_ref / np.sqrt(sigma2))
        res = OracleNoisePredictor(n_r / np.sqrt(sigma2))
        a, _ = ddmfc_sample(f_ref_rx, r_rx, [f_ref_rx], base, res,
                            params, sched, chan)
        b, _ = ddmfc_sample(f_ref_rx, r_rx, [f_ref_rx], base, res,
                            params, sched, chan)
        np.testing.assert_array_equal(a, b)

    def test_start_step_exceeding_total_rejected(self, sched_default):
        chan = channel_for(8, 0.25)
        params = CompensationParams(lambda_i=0.7, k_of_t=lambda t: 0.0,
                                    sigma_t=0.0, start_step=1001)
        with pytest.raises(ValueError):
            ddmfc_sample(np.zeros(8), np.zeros(8), [],
                         OracleNoisePredictor(np.zeros(8)),
                         OracleNoisePredictor(np.zeros(8)),
                         params, sched_default, chan)
