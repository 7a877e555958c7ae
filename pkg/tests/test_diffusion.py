import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simstex.diffusion import (GuidanceConfig, NoiseSchedule, cfg_combine,
                               ddim_sigma, ddim_step, make_schedule,
                               predict_x0, stochastic_encode)
from simstex.errors import GuidanceError, ScheduleError


def synthetic_schedule(alpha_lo=0.64, alpha_hi=0.25):
    """Two-point schedule with hand-picked alpha_bar values at t=1, 2."""
    alpha_bar = np.array([1.0, alpha_lo, alpha_hi])
    times = np.array([2, 1], dtype=np.int64)
    return NoiseSchedule(alpha_bar, times, {})


class TestMakeSchedule:
    def test_default_truncated(self):
        s = make_schedule()
        assert s.num_steps == 50
        assert s.substeps[0] == 1000
        assert s.substeps.min() >= 300
        assert s.t_final == 300

    def test_alpha_bar_first_step(self):
        s = make_schedule()
        assert s.alpha_bar(1) == pytest.approx(1.0 - 0.00085, abs=1e-12)

    def test_monotone_decreasing(self):
        s = make_schedule()
        ab = s.alpha_bar_all[1:]
        assert (np.diff(ab) < 0).all()
        assert s.alpha_bar(1000) < s.alpha_bar(500) < s.alpha_bar(1)

    def test_bad_ranges(self):
        with pytest.raises(ScheduleError):
            make_schedule(S=2000)
        with pytest.raises(ScheduleError):
            make_schedule(t_min=900, t_max=400)
        with pytest.raises(ScheduleError):
            make_schedule(S=900, t_min=300, t_max=1000)  # collisions

    def test_json_roundtrip(self):
        s = make_schedule(S=20, t_min=100)
        s2 = NoiseSchedule.from_json(s.to_json())
        assert np.array_equal(s.times, s2.times)
        assert np.array_equal(s.alpha_bar_all, s2.alpha_bar_all)
        assert json.loads(s.to_json())["S"] == 20

    def test_start_index_for(self):
        s = make_schedule()
        i = s.start_index_for(500)
        assert s.pair(i)[0] <= 500 < s.pair(i + 1)[0]


class TestDdimSigma:
    def test_zero_eta(self):
        s = synthetic_schedule()
        assert ddim_sigma(s, 1, 0.0) == 0.0

    def test_formula_value(self):
        s = synthetic_schedule()
        expected = math.sqrt(0.36 / 0.75) * math.sqrt(1.0 - 0.25 / 0.64)
        assert ddim_sigma(s, 1, 1.0) == pytest.approx(expected, rel=1e-12)
        assert ddim_sigma(s, 1, 1.0) == pytest.approx(0.5409, abs=5e-4)

    def test_linear_in_eta(self):
        s = synthetic_schedule()
        assert ddim_sigma(s, 1, 0.5) == pytest.approx(0.5 * ddim_sigma(s, 1, 1.0))

    def test_matches_ddpm_posterior(self):
        s = make_schedule()
        for i in (1, 10, 25, 50):
            t_hi, t_lo = s.pair(i)
            a_hi, a_lo = s.alpha_bar(t_hi), s.alpha_bar(t_lo)
            post_var = (1 - a_lo) / (1 - a_hi) * (1 - a_hi / a_lo)
            assert ddim_sigma(s, i, 1.0) ** 2 == pytest.approx(post_var, rel=1e-12)


class TestDdimStep:
    def test_zero_eps_deterministic(self):
        s = synthetic_schedule()
        x = np.array([1.0], np.float32)
        out = ddim_step(x, np.zeros(1, np.float32), s, 1, 0.0, 0.0)
        assert out[0] == pytest.approx(1.6, abs=1e-6)

    def test_exact_noise_transport(self):
        s = synthetic_schedule()
        x = np.array([math.sqrt(0.25) * 2 + math.sqrt(0.75) * 1], np.float32)
        eps = np.ones(1, np.float32)
        out = ddim_step(x, eps, s, 1, 0.0, 0.0)
        expected = math.sqrt(0.64) * 2 + math.sqrt(0.36) * 1
        assert out[0] == pytest.approx(expected, abs=1e-6)

    def test_stochastic_term_variance(self):
        s = synthetic_schedule()
        sigma = ddim_sigma(s, 1, 1.0)
        n = 100_000
        x = np.zeros(n, np.float32)
        eps = np.zeros(n, np.float32)
        det = ddim_step(x, eps, s, 1, 0.0, 0.0)
        out = ddim_step(x, eps, s, 1, 1.0, 1.0, np.random.default_rng(11))
        var = float(np.var(out - det))
        assert var == pytest.approx(sigma ** 2, rel=0.02)

    def test_tau_scales_only_noise(self):
        s = synthetic_schedule()
        n = 100_000
        x = np.zeros(n, np.float32)
        eps = np.zeros(n, np.float32)
        det = ddim_step(x, eps, s, 1, 0.0, 0.0)
        half = ddim_step(x, eps, s, 1, 1.0, 0.5, np.random.default_rng(12))
        sigma = ddim_sigma(s, 1, 1.0)
        assert float(np.mean(half)) == pytest.approx(float(np.mean(det)), abs=3e-3)
        assert float(np.var(half - det)) == pytest.approx(0.25 * sigma ** 2, rel=0.02)

    def test_shape_mismatch(self):
        s = synthetic_schedule()
        with pytest.raises(ScheduleError):
            ddim_step(np.zeros(3), np.zeros(4), s, 1, 0.0, 0.0)

    def test_delta_oracle_reaches_target(self):
        # exact point-mass score, eta=0, full untruncated run: the final
        # state and its clean prediction equal the target
        sched = make_schedule(S=50, t_min=0, t_max=1000)
        target = 0.73
        rng = np.random.default_rng(3)
        x = rng.standard_normal(4096).astype(np.float32)
        for i in range(sched.num_steps, 0, -1):
            t_hi = sched.pair(i)[0]
            a = sched.alpha_bar(t_hi)
            eps = (x - math.sqrt(a) * target) / math.sqrt(1.0 - a)
            xhat0 = predict_x0(x, eps, sched, i)
            x = ddim_step(x, eps, sched, i, 0.0, 0.0)
        assert np.abs(xhat0 - target).max() <= 1e-3
        assert np.abs(x - target).max() <= 1e-3

    def test_marginal_preserved_unit_variance(self):
        # exact unit-Gaussian score, eta=tau=1.  The plug-in posterior-mean
        # chain is affine for Gaussian data, so the exact variance recursion
        # v <- A^2 v + sigma^2 is the oracle; it stays within a few percent
        # of 1 across the whole truncated run.
        sched = make_schedule()
        rng = np.random.default_rng(17)
        x = rng.standard_normal(200_000).astype(np.float32)
        v_theory = 1.0
        for i in range(sched.num_steps, 0, -1):
            t_hi, t_lo = sched.pair(i)
            a_hi, a_lo = sched.alpha_bar(t_hi), sched.alpha_bar(t_lo)
            sigma = ddim_sigma(sched, i, 1.0)
            coef = (math.sqrt(a_lo * a_hi)
                    + math.sqrt((1 - a_lo - sigma ** 2) * (1 - a_hi)))
            v_theory = coef * coef * v_theory + sigma * sigma
            eps = math.sqrt(1.0 - a_hi) * x  # exact score of N(0, 1) data
            x = ddim_step(x, eps, sched, i, 1.0, 1.0, rng)
            assert float(np.var(x)) == pytest.approx(v_theory, rel=0.02)
            assert abs(v_theory - 1.0) < 0.05


class TestPredictX0:
    def test_inverts_forward(self):
        s = synthetic_schedule()
        x = np.array([math.sqrt(0.25) * 2 + math.sqrt(0.75) * 1], np.float32)
        out = predict_x0(x, np.ones(1, np.float32), s, 1)
        assert out[0] == pytest.approx(2.0, abs=1e-6)

    def test_zero_eps(self):
        s = synthetic_schedule()
        x = np.array([0.5], np.float32)
        assert predict_x0(x, np.zeros(1, np.float32), s, 1)[0] == \
            pytest.approx(0.5 / math.sqrt(0.25), abs=1e-6)

    def test_roundtrip_near_clean(self):
        sched = make_schedule(S=50, t_min=0, t_max=1000)
        i = 1  # least-noisy query time
        t_hi = sched.pair(i)[0]
        a = sched.alpha_bar(t_hi)
        rng = np.random.default_rng(8)
        x0 = rng.standard_normal(1000).astype(np.float32)
        noise = rng.standard_normal(1000).astype(np.float32)
        x = math.sqrt(a) * x0 + math.sqrt(1 - a) * noise
        out = predict_x0(x.astype(np.float32), noise, sched, i)
        assert np.abs(out - x0).max() <= 1e-5


class TestCfgCombine:
    def test_pure_joint(self):
        j = np.full(4, 2.0, np.float32)
        out = cfg_combine(np.zeros(4, np.float32), j, None, GuidanceConfig(1.0, 0.0))
        assert np.array_equal(out, j)

    def test_weight_five(self):
        out = cfg_combine(np.zeros(2, np.float32), np.ones(2, np.float32),
                          None, GuidanceConfig(5.0, 0.0))
        assert np.allclose(out, 5.0)

    def test_identity_on_equal_inputs(self):
        v = np.array([0.3, -1.2], np.float32)
        out = cfg_combine(v, v, v, GuidanceConfig(5.0, 3.0))
        assert np.allclose(out, v, atol=1e-6)

    def test_missing_text_eps(self):
        with pytest.raises(GuidanceError):
            cfg_combine(np.zeros(2), np.zeros(2), None, GuidanceConfig(5.0, 3.0))

    @given(st.floats(0, 8), st.floats(0, 8))
    @settings(max_examples=30, deadline=None)
    def test_affine_property(self, wj, wt):
        v = np.array([0.7, -0.1, 2.5], np.float32)
        out = cfg_combine(v, v, v, GuidanceConfig(wj, wt))
        assert np.allclose(out, v, atol=1e-4)


class TestStochasticEncode:
    def test_t_zero_identity(self):
        s = make_schedule(t_min=0)
        x = np.array([1.5, -2.0], np.float32)
        out = stochastic_encode(x, s, 0, np.random.default_rng(0))
        assert np.array_equal(out, x)

    def test_marginal_variance(self):
        s = make_schedule()
        t = 500
        out = stochastic_encode(np.zeros(100_000, np.float32), s, t,
                                np.random.default_rng(4))
        assert float(np.var(out)) == pytest.approx(1.0 - s.alpha_bar(t), rel=0.02)

    def test_seed_reproducible(self):
        s = make_schedule()
        x = np.ones(100, np.float32)
        a = stochastic_encode(x, s, 700, np.random.default_rng(5))
        b = stochastic_encode(x, s, 700, np.random.default_rng(5))
        assert np.array_equal(a, b)


class TestScheduleErrorPaths:
    def test_large_eta_overshoots_target_level(self):
        # eta > 1 can push sigma^2 past 1 - alpha_lo
        s = synthetic_schedule()
        with pytest.raises(ScheduleError):
            ddim_step(np.zeros(4, np.float32), np.zeros(4, np.float32),
                      s, 1, 2.0, 1.0, np.random.default_rng(0))

    def test_stochastic_step_requires_rng(self):
        s = synthetic_schedule()
        with pytest.raises(ScheduleError):
            ddim_step(np.zeros(4, np.float32), np.zeros(4, np.float32),
                      s, 1, 1.0, 1.0, None)

    def test_negative_guidance_weight_rejected(self):
        with pytest.raises(GuidanceError):
            GuidanceConfig(-1.0, 0.0)
