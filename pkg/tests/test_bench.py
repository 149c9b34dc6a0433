import numpy as np
import pytest

from scoredistill import bench
from scoredistill.bench import (Record, SweepResult, alpha_grid_around, alpha_sweep,
                                denoise_benchmark, engine_compare, gap_curve, lambda_sweep,
                                parse_engine, psnr, run_jobs, sampler_compare, ssim, worker_count)
from scoredistill.distill import DistillConfig, Engine
from scoredistill.oracle import GaussianMixture, noise_prediction_gap, ExactUnconditional
from scoredistill.schedule import make_linear_schedule

FAST = DistillConfig(steps=60)


class TestPsnr:
    def test_identical_is_capped(self):
        a = np.random.default_rng(0).uniform(size=(4, 4))
        assert psnr(a, a) == 99.0

    def test_constant_offset(self):
        assert psnr(np.full((5, 5), 0.3), np.full((5, 5), 0.4)) == pytest.approx(20.0)

    def test_pinned_pair(self):
        a = np.array([[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8],
                      [0.9, 1.0, 0.0, 0.1], [0.2, 0.3, 0.4, 0.5]])
        b = np.array([[0.0, 0.2, 0.4, 0.4], [0.5, 0.5, 0.7, 0.9],
                      [1.0, 1.0, 0.0, 0.0], [0.2, 0.3, 0.5, 0.5]])
        # seven entries differ by exactly 0.1: mse = 7 * 0.01 / 16
        assert psnr(a, b) == pytest.approx(10 * np.log10(16 / 0.07), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))


class TestSsim:
    def test_identical(self):
        a = np.random.default_rng(1).uniform(size=(12, 12))
        assert ssim(a, a) == pytest.approx(1.0)

    def test_opposite_constants(self):
        # luminance term (c1) / (1 + c1) with zero variance everywhere
        assert ssim(np.zeros((10, 10)), np.ones((10, 10))) < 0.01

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a, b = rng.uniform(size=(2, 16, 16))
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((5, 5)), np.zeros((5, 5)))


class TestSweepResult:
    def test_aggregates(self):
        recs = [Record("x", c, s, "m", v) for c, vals in (("a", [1, 2, 3, 4]), ("b", [5, 5, 5, 9]))
                for s, v in enumerate(vals)]
        res = SweepResult("x", ["a", "b"], recs, "m")
        assert res.median("a") == 2.5 and res.iqr("b") == 1.0
        assert res.cells[res.winner] == "b"
        assert SweepResult("x", ["a", "b"], recs, "m", higher_is_better=False).winner == 0
        assert res.summary()["winner"] == "b"


class TestJobs:
    def test_worker_env(self, monkeypatch):
        monkeypatch.setenv(bench.WORKERS_ENV, "3")
        assert worker_count() == 3
        monkeypatch.setenv(bench.WORKERS_ENV, "many")
        with pytest.raises(ValueError):
            worker_count()
        monkeypatch.delenv(bench.WORKERS_ENV)
        assert worker_count() == 1

    def test_parallel_matches_serial(self):
        serial = denoise_benchmark(T_levels=(50,), n_seeds=3, workers=1)
        parallel = denoise_benchmark(T_levels=(50,), n_seeds=3, workers=2)
        assert serial.records == parallel.records

    def test_run_jobs_keeps_order(self):
        assert run_jobs(abs, [-3, 2, -1], workers=2) == [3, 2, 1]


def perfect_inversion(prior, bias, clean):
    def f(z_t, t, sched):
        return (z_t - np.sqrt(sched.alpha_bar(t)) * clean) / sched.sigma(t)
    return f


class TestDenoise:
    def test_perfect_predictor_hits_cap(self):
        res = denoise_benchmark([perfect_inversion], n_seeds=2)
        for c in res.cells:
            assert c.startswith("perfect_inversion@T")
            assert np.all(res.values(c) == 99.0)

    def test_noise_makes_recovery_harder(self):
        res = denoise_benchmark(["exact"], T_levels=(50, 300), n_seeds=5)
        assert res.median("exact@T50") > res.median("exact@T300")

    def test_exact_best_at_low_noise(self):
        res = denoise_benchmark(T_levels=(50,), n_seeds=5)
        mse = {c: np.median(res.values(c, "mse")) for c in res.cells}
        assert mse["exact@T50"] < mse["train_matched@T50"] and mse["exact@T50"] < mse["inference_zero@T50"]

    def test_psnr_mse_consistent(self):
        res = denoise_benchmark(T_levels=(100,), n_seeds=3)
        for c in res.cells:
            p, m = res.values(c, "psnr"), res.values(c, "mse")
            np.testing.assert_allclose(p, np.minimum(99.0, 10 * np.log10(1.0 / m)))

    def test_unknown_predictor(self):
        with pytest.raises(ValueError):
            denoise_benchmark(["oracle9000"], n_seeds=1)


class TestGapCurve:
    def test_exact_matches_closed_form_and_bias_above(self):
        res = gap_curve(n=20_000)
        sched = make_linear_schedule()
        for T in (50, 100, 200, 300):
            exact = dict((r.seed, r.value) for r in res.records if r.cell == "exact")[T]
            assert exact == pytest.approx(np.sqrt(sched.alpha_bar(T)), rel=0.01)
            for c in ("train_matched", "inference_zero"):
                assert dict((r.seed, r.value) for r in res.records if r.cell == c)[T] > exact

    def test_single_draw_consistent_with_many(self):
        d, t = 48, 200
        sched = make_linear_schedule()
        pred = ExactUnconditional(GaussianMixture.single(np.zeros(d), 1.0))
        rng = np.random.default_rng(0)
        singles = [noise_prediction_gap(pred, rng.standard_normal(d), t, 1, sched, 1000 + s) for s in range(200)]
        many = noise_prediction_gap(pred, rng.standard_normal((10_000, d)), t, 10_000, sched, 999)
        assert abs(singles[0] - many) < 5 * np.std(singles)


class TestEngineGrammar:
    @pytest.mark.parametrize("label, changes, on", [
        ("usd", {"engine": Engine.USD}, True),
        ("lambda:0.5", {"engine": Engine.LAMBDA, "lam": 0.5}, True),
        ("usd+rv0.1", {"engine": Engine.USD, "beta_rv": 0.1}, True),
        ("sds@off", {"engine": Engine.SDS}, False),
        ("noop", {"engine": Engine.USD, "steps": 0}, True),
    ])
    def test_parse(self, label, changes, on):
        assert parse_engine(label) == (changes, on)

    def test_unknown(self):
        with pytest.raises(ValueError):
            parse_engine("nerf")


class TestSweeps:
    def test_lambda_needs_five_seeds(self):
        with pytest.raises(ValueError):
            lambda_sweep(n_seeds=1, base_config=FAST)

    def test_lambda_rows(self):
        res = lambda_sweep(base_config=FAST, n_seeds=5)
        assert res.cells == ["lambda=0", "lambda=0.5", "lambda=1"]
        assert all(len(res.values(c)) == 5 for c in res.cells)

    def test_lambda_one_equals_sds(self):
        lam = lambda_sweep([1.0], base_config=FAST, n_seeds=5)
        sds = engine_compare(["sds"], FAST, n_seeds=5)
        np.testing.assert_allclose(lam.values("lambda=1"), sds.values("sds"), rtol=1e-9)

    def test_csd_equals_lambda_zero(self):
        res = engine_compare(["csd", "lambda:0"], FAST, n_seeds=2)
        assert res.values("csd").tobytes() == res.values("lambda:0").tobytes()

    def test_diagonal_only_grid(self):
        res = alpha_sweep([(7.5, 7.5)], FAST, n_seeds=5)
        assert res.cells[res.winner] == "a1=7.5,a2=7.5"

    def test_alpha_grid(self):
        grid = alpha_grid_around(7.5, 2.5)
        assert len(grid) == 9 and (7.5, 7.5) in grid and (5.0, 10.0) in grid

    def test_alpha_swap_is_asymmetric(self):
        res = alpha_sweep([(5.0, 10.0), (10.0, 5.0)], FAST, n_seeds=5)
        assert res.values("a1=5,a2=10")[0] != res.values("a1=10,a2=5")[0]

    def test_residual_variance_records(self):
        res = engine_compare(["usd", "sds"], DistillConfig(steps=0), n_seeds=2, variance_n=200)
        assert len(res.values("usd", "residual_variance")) == 2


class TestSamplerCompare:
    def test_cells_and_metric(self):
        res = sampler_compare(("collapsed", "rectified@off"), n_seeds=3, steps=10)
        assert res.cells == ["collapsed", "rectified@off"] and res.metric == "distance"
        assert not res.higher_is_better

    def test_unknown_combiner(self):
        with pytest.raises(ValueError):
            sampler_compare(("general",), n_seeds=1)

    def test_no_guidance_is_far(self):
        guided = sampler_compare(("rectified",), n_seeds=20, steps=25)
        off = sampler_compare(("collapsed", "rectified"), n_seeds=20, steps=25, omega=0.0)
        for c in off.cells:
            assert off.median(c) > 3 * guided.median("rectified")
