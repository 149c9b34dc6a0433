import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scoredistill.guidance import (Combiner, FromNoisedLatent, FromPureNoise, GuidanceConfig,
                                   cfg_collapsed, cfg_general, cfg_rectified, ddpm_sample,
                                   guided_predictor, sampling_timesteps)
from scoredistill.oracle import ExactPredictor, GaussianMixture
from scoredistill.schedule import make_linear_schedule

SCHED = make_linear_schedule()
vec = arrays(np.float64, 4, elements=st.floats(-10, 10))
scale = st.floats(-20, 20)


class TestCombiners:
    def test_general_arithmetic(self):
        out = cfg_general([1.0, 0.0], [0.5, 0.0], [0.0, 0.0], 2.0, 1.0)
        np.testing.assert_allclose(out, [1.5, 0.0])

    def test_collapsed_arithmetic(self):
        np.testing.assert_allclose(cfg_collapsed([1.0, 0.0], [0.0, 0.0], 7.5), [7.5, 0.0])

    def test_general_unit_scales_telescope(self):
        rng = np.random.default_rng(0)
        a, b, u = rng.normal(size=(3, 5))
        np.testing.assert_allclose(cfg_general(a, b, u, 1.0, 1.0), a, atol=1e-14)

    def test_general_collapses_on_diagonal(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            a, b, u = rng.normal(size=(3, 6))
            w = rng.uniform(0, 15)
            worst = max(worst, np.max(np.abs(cfg_general(a, b, u, w, w) - cfg_collapsed(a, u, w))))
        assert worst < 1e-12

    @settings(max_examples=50)
    @given(c=vec, u=vec)
    def test_collapsed_identities(self, c, u):
        np.testing.assert_allclose(cfg_collapsed(c, u, 1.0), c, atol=1e-12)
        np.testing.assert_allclose(cfg_collapsed(u, u, 3.3), u, atol=1e-12)
        np.testing.assert_allclose(cfg_rectified(c, u, 0.0), u, atol=1e-12)
        np.testing.assert_array_equal(cfg_rectified(c, u, 7.5), cfg_collapsed(c, u, 7.5))

    @settings(max_examples=50)
    @given(a=vec, a2=vec, b=vec, u=vec, w1=scale, w2=scale, k=st.floats(-3, 3))
    def test_affine_in_each_argument(self, a, a2, b, u, w1, w2, k):
        # f(a + k (a2 - a)) = f(a) + k (f(a2) - f(a)) for an affine f
        mix = a + k * (a2 - a)
        lhs = cfg_general(mix, b, u, w1, w2)
        rhs = cfg_general(a, b, u, w1, w2) + k * (cfg_general(a2, b, u, w1, w2)
                                                  - cfg_general(a, b, u, w1, w2))
        np.testing.assert_allclose(lhs, rhs, atol=1e-8 * (1 + np.max(np.abs(lhs))))
        lhs = cfg_collapsed(a, mix, w1)
        rhs = cfg_collapsed(a, a, w1) + k * (cfg_collapsed(a, a2, w1) - cfg_collapsed(a, a, w1))
        np.testing.assert_allclose(lhs, rhs, atol=1e-8 * (1 + np.max(np.abs(lhs))))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_collapsed(np.zeros(3), np.zeros(4), 1.0)

    def test_config_validation(self):
        assert GuidanceConfig(combiner="general").combiner is Combiner.GENERAL
        with pytest.raises(ValueError):
            GuidanceConfig(omega=float("nan"))

    def test_general_predictor_needs_pose_term(self):
        f = ExactPredictor(GaussianMixture.single(np.zeros(2), 1.0))
        with pytest.raises(ValueError):
            guided_predictor(f, f, cfg=GuidanceConfig(combiner="general"))


class TestSampler:
    def _perfect(self, z0):
        # recovers the noise that forward_diffuse used from the clean latent
        def f(z_t, t, sched):
            return (z_t - np.sqrt(sched.alpha_bar(t)) * z0) / sched.sigma(t)
        return f

    @pytest.mark.parametrize("T, steps", [(50, None), (300, None), (1000, 50)])
    def test_exact_inversion(self, T, steps):
        z0 = np.random.default_rng(2).normal(size=8)
        out = ddpm_sample(self._perfect(z0), SCHED, FromNoisedLatent(z0, T), steps=steps,
                          seed=3, eta=0.0)
        assert np.max(np.abs(out - z0)) < 1e-8

    def test_deterministic(self):
        f = ExactPredictor(GaussianMixture([0.5, 0.5], [[1.0, 0.0], [-1.0, 0.0]], [0.1, 0.1]))
        for eta in (0.0, 1.0):
            a = ddpm_sample(f, SCHED, FromPureNoise(2), steps=40, seed=7, eta=eta)
            b = ddpm_sample(f, SCHED, FromPureNoise(2), steps=40, seed=7, eta=eta)
            assert a.tobytes() == b.tobytes()

    def test_ancestral_differs_from_ddim(self):
        f = ExactPredictor(GaussianMixture.single(np.zeros(3), 1.0))
        a = ddpm_sample(f, SCHED, FromPureNoise(3), steps=40, seed=7, eta=0.0)
        b = ddpm_sample(f, SCHED, FromPureNoise(3), steps=40, seed=7, eta=1.0)
        assert not np.allclose(a, b)

    def test_trace_length(self):
        f = ExactPredictor(GaussianMixture.single(np.zeros(3), 1.0))
        _, trace = ddpm_sample(f, SCHED, FromPureNoise(3), steps=25, return_trace=True)
        assert len(trace) == len(sampling_timesteps(1000, 25)) + 1

    def test_timesteps(self):
        ts = sampling_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 1 and np.all(np.diff(ts) < 0)
        np.testing.assert_array_equal(sampling_timesteps(5, None), [5, 4, 3, 2, 1])
        with pytest.raises(ValueError):
            sampling_timesteps(10, 0)

    def test_bad_start(self):
        f = ExactPredictor(GaussianMixture.single(np.zeros(2), 1.0))
        with pytest.raises(ValueError):
            ddpm_sample(f, SCHED, FromNoisedLatent(np.zeros(2), 0))
        with pytest.raises(TypeError):
            ddpm_sample(f, SCHED, np.zeros(2))

    def test_rectified_lands_on_narrow_conditional(self):
        d, sigma_c = 8, 0.05
        rng = np.random.default_rng(4)
        mean = rng.normal(0, 0.5, d)
        cond = ExactPredictor(GaussianMixture.single(mean, sigma_c ** 2))
        base = ExactPredictor(GaussianMixture([0.5, 0.5], rng.normal(0, 0.5, (2, d)), [0.25, 0.25]))
        f = guided_predictor(cond, base, 7.5)
        hits = 0
        for seed in range(200):
            z = ddpm_sample(f, SCHED, FromPureNoise(d), steps=50, seed=seed)
            hits += np.linalg.norm(z - mean) / np.sqrt(d) <= 3 * sigma_c
        assert hits >= 190
