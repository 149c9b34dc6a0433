import numpy as np
import pytest

from scoredistill.distill import (DistillConfig, Engine, NumericalAbort, PlainSGD, VsdAux,
                                  Weighting, build_oracles, distill_run, dds_residual,
                                  engine_residual, lambda_residual, reference_view_loss,
                                  residual_variance, sds_residual, usd_residual,
                                  vsd_lite_residual)
from scoredistill.guidance import cfg_collapsed
from scoredistill.oracle import BiasConfig, ExactPredictor
from scoredistill.scene import WorldConfig, make_world, render, world_prior
from scoredistill.schedule import forward_diffuse, make_linear_schedule

SCHED = make_linear_schedule()


@pytest.fixture(scope="module")
def world():
    return make_world(0)


@pytest.fixture(scope="module")
def oracles(world):
    return build_oracles(world)


class TestResiduals:
    def test_sds_examples(self):
        np.testing.assert_array_equal(sds_residual([2.0, 1.0], [1.0, 1.0]), [1.0, 0.0])
        np.testing.assert_array_equal(sds_residual([0.3, 0.4], [0.3, 0.4]), [0.0, 0.0])

    def test_lambda_arithmetic(self):
        np.testing.assert_allclose(lambda_residual([1.0], [0.0], [-1.0], 7.5, 0.5), [8.0])

    def test_lambda_endpoints(self):
        rng = np.random.default_rng(0)
        worst0 = worst1 = 0.0
        for _ in range(1000):
            c, p, e = rng.normal(size=(3, 6))
            w = rng.uniform(0, 15)
            worst1 = max(worst1, np.max(np.abs(lambda_residual(c, p, e, w, 1.0)
                                               - sds_residual(cfg_collapsed(c, p, w), e))))
            worst0 = max(worst0, np.max(np.abs(lambda_residual(c, p, e, w, 0.0) - usd_residual(c, p, w))))
        assert worst0 < 1e-12 and worst1 < 1e-12

    def test_usd_properties(self):
        rng = np.random.default_rng(1)
        c, p = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(usd_residual(c, c, 7.5), np.zeros(5))
        np.testing.assert_allclose(usd_residual(c, p, 3.0 * 2.5), 3.0 * usd_residual(c, p, 2.5))

    def test_dds(self):
        rng = np.random.default_rng(2)
        c, p = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(dds_residual(c, c, 7.5), np.zeros(5))
        np.testing.assert_array_equal(dds_residual(c, p, 7.5), usd_residual(c, p, 7.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            usd_residual(np.zeros(2), np.zeros(3), 1.0)


class TestVsdLite:
    def test_perfect_aux_gives_usd(self):
        rng = np.random.default_rng(3)
        c, u = rng.normal(size=(2, 4))
        aux = VsdAux(4, 1000)
        b = aux.bucket(300)
        aux.c[b] = u  # A = 0, so the auxiliary predicts u everywhere in this bucket
        out = vsd_lite_residual(c, u, aux, rng.normal(size=4), 300, 7.5)
        np.testing.assert_allclose(out, usd_residual(c, u, 7.5), atol=1e-14)

    def test_fresh_aux_is_lambda_one_without_noise(self):
        rng = np.random.default_rng(4)
        c, u = rng.normal(size=(2, 4))
        out = vsd_lite_residual(c, u, VsdAux(4, 1000), rng.normal(size=4), 500, 7.5)
        np.testing.assert_allclose(out, lambda_residual(c, u, np.zeros(4), 7.5, 1.0), atol=1e-14)

    def test_requires_aux(self):
        with pytest.raises(ValueError):
            vsd_lite_residual(np.zeros(2), np.zeros(2), None, np.zeros(2), 1, 7.5)

    def test_buckets_cover_range(self):
        aux = VsdAux(4, 1000, n_buckets=8)
        assert aux.bucket(1) == 0 and aux.bucket(1000) == 7
        assert aux.bucket(125) == 0 and aux.bucket(126) == 1

    def test_updates_reduce_error(self, world):
        rng = np.random.default_rng(5)
        z = render(np.full((world.n, world.n), 0.5), world.poses[2], world)
        t = 400
        aux = VsdAux(world.d, 1000)

        def err():
            eps = np.random.default_rng(6).standard_normal((1000, world.d))
            z_t = forward_diffuse(z, t, eps, SCHED)
            return np.mean([np.linalg.norm(aux(zt, t) - e) for zt, e in zip(z_t, eps)])

        before = err()
        for _ in range(500):
            eps = rng.standard_normal(world.d)
            aux.update(forward_diffuse(z, t, eps, SCHED), t, eps)
        assert err() < before


class TestReferenceView:
    def test_zero_at_equality(self, world):
        target = render(world.gt, world.input_pose, world)
        loss, grad = reference_view_loss(world.gt, world, 200, 0, SCHED, target=target)
        assert loss < 1e-12
        assert np.max(np.abs(grad)) < 1e-12

    def test_symmetric(self, world):
        rng = np.random.default_rng(7)
        a, b = rng.uniform(size=(2, world.n, world.n))
        pred = ExactPredictor(world_prior(world))
        ra, rb = render(a, 0.0, world), render(b, 0.0, world)
        l1, _ = reference_view_loss(a, world, 300, 8, SCHED, pred, target=rb)
        l2, _ = reference_view_loss(b, world, 300, 8, SCHED, pred, target=ra)
        assert l1 == pytest.approx(l2, rel=1e-12)

    def test_gradient_matches_finite_differences(self, world):
        rng = np.random.default_rng(9)
        theta = rng.uniform(size=(world.n, world.n))
        pred = ExactPredictor(world_prior(world))
        _, grad = reference_view_loss(theta, world, 200, 10, SCHED, pred)
        h = 1e-5
        for p in rng.choice(world.n ** 2, 20, replace=False):
            e = np.zeros(world.n ** 2)
            e[p] = h
            lp, _ = reference_view_loss(theta + e.reshape(theta.shape), world, 200, 10, SCHED, pred)
            lm, _ = reference_view_loss(theta - e.reshape(theta.shape), world, 200, 10, SCHED, pred)
            fd = (lp - lm) / (2 * h)
            assert abs(grad.ravel()[p] - fd) <= 1e-4 * max(abs(fd), 1e-6)

    def test_independent_noise_is_not_zero(self, world):
        target = render(world.gt, world.input_pose, world)
        loss, _ = reference_view_loss(world.gt, world, 200, 0, SCHED, shared_noise=False, target=target)
        assert loss > 1e-6


class TestEngineResidual:
    def test_csd_is_lambda_zero(self, world, oracles):
        rng = np.random.default_rng(11)
        z = render(world.gt, world.poses[1], world)
        eps = rng.standard_normal(world.d)
        z_t = forward_diffuse(z, 300, eps, SCHED)
        args = (oracles, world.poses[1], z, z_t, 300, eps, SCHED)
        csd = engine_residual(DistillConfig(engine="csd"), *args)
        lam0 = engine_residual(DistillConfig(engine="lambda", lam=0.0), *args)
        sds = engine_residual(DistillConfig(engine="sds"), *args)
        lam1 = engine_residual(DistillConfig(engine="lambda", lam=1.0), *args)
        np.testing.assert_array_equal(csd, lam0)
        np.testing.assert_allclose(sds, lam1, atol=1e-12)

    def test_usd_independent_of_eps_at_fixed_z_t(self, world, oracles):
        z = render(world.gt, world.poses[1], world)
        z_t = forward_diffuse(z, 300, np.ones(world.d), SCHED)
        a = engine_residual(DistillConfig(engine="usd"), oracles, world.poses[1], z, z_t, 300,
                            np.zeros(world.d), SCHED)
        b = engine_residual(DistillConfig(engine="usd"), oracles, world.poses[1], z, z_t, 300,
                            np.ones(world.d), SCHED)
        np.testing.assert_array_equal(a, b)

    def test_dds_pinned_value_is_finite(self, world, oracles):
        theta = np.full((world.n, world.n), 0.5)
        pose = world.poses[1]
        z = render(theta, pose, world)
        eps = np.random.default_rng(12).standard_normal(world.d)
        z_t = forward_diffuse(z, 500, eps, SCHED)
        r = engine_residual(DistillConfig(engine="dds"), oracles, pose, z, z_t, 500, eps, SCHED)
        assert np.all(np.isfinite(r)) and np.linalg.norm(r) > 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DistillConfig(engine="lambda", lam=1.5)
        with pytest.raises(ValueError):
            DistillConfig(steps=-1)
        with pytest.raises(ValueError):
            DistillConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            DistillConfig(engine="nerf")


def _ridge_solution(world, ridge=1e-3):
    A = np.concatenate([world.operator(p).matrix for p in world.poses])
    b = np.concatenate([render(world.gt, p, world) for p in world.poses])
    return np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ b).reshape(world.n, world.n)


def _psnr(theta, gt):
    return 10 * np.log10(1.0 / np.mean((np.clip(theta, 0, 1) - gt) ** 2))


class TestDistillRun:
    def test_zero_steps_returns_init(self, world, oracles):
        run = distill_run(world, oracles, DistillConfig(steps=0))
        np.testing.assert_array_equal(run.theta, np.full((world.n, world.n), 0.5))
        assert len(run.psnrs) == 0

    def test_reproducible(self, world, oracles):
        cfg = DistillConfig(engine="sds", steps=60, beta_rv=0.1)
        a = distill_run(world, oracles, cfg)
        b = distill_run(world, build_oracles(make_world(0)), cfg)
        assert a.theta.tobytes() == b.theta.tobytes()
        assert a.residual_norms.tobytes() == b.residual_norms.tobytes()

    def test_seed_changes_run(self, world, oracles):
        a = distill_run(world, oracles, DistillConfig(steps=30, seed=0))
        b = distill_run(world, oracles, DistillConfig(steps=30, seed=1))
        assert not np.array_equal(a.theta, b.theta)

    @pytest.mark.parametrize("engine", ["sds", "usd", "dds", "csd", "vsd_lite", "general"])
    def test_every_engine_runs(self, world, oracles, engine):
        run = distill_run(world, oracles, DistillConfig(engine=engine, steps=40))
        assert np.all(np.isfinite(run.theta)) and len(run.steps) == 40
        assert list(run.trajectory_rows())[0][0] == 0

    def test_sgd_and_weighting(self, world, oracles):
        cfg = DistillConfig(steps=40, optimizer=PlainSGD(), learning_rate=1e-3,
                            wt_kind=Weighting.ONE_MINUS_ALPHA_BAR, include_sqrt_alpha_in_chain=False)
        assert np.all(np.isfinite(distill_run(world, oracles, cfg).theta))

    def test_divergence_aborts(self, world, oracles):
        cfg = DistillConfig(engine="sds", steps=20, learning_rate=1e200, optimizer=PlainSGD())
        with np.errstate(all="ignore"), pytest.raises(NumericalAbort):
            distill_run(world, oracles, cfg)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_consistent_world_close_to_least_squares(self, seed):
        w = make_world(seed, WorldConfig(k_modes=1))
        run = distill_run(w, build_oracles(w, BiasConfig()),
                          DistillConfig(engine=Engine.USD, steps=2000, learning_rate=0.005))
        assert _psnr(_ridge_solution(w), w.gt) - run.final_psnr <= 3.0


class TestResidualVariance:
    def test_fixed_z_t_deterministic_engine(self, world, oracles):
        theta = np.full((world.n, world.n), 0.5)
        v = residual_variance(DistillConfig(engine="usd"), oracles, theta, world.poses[1], 600,
                              100, 0, fixed_z_t=True)
        assert v < 1e-25  # identical rows up to summation round-off

    def test_usd_below_sds(self, world, oracles):
        theta = np.full((world.n, world.n), 0.5)
        args = (oracles, theta, world.poses[1], 600, 10_000, 0)
        assert (residual_variance(DistillConfig(engine="usd"), *args)
                <= residual_variance(DistillConfig(engine="sds"), *args))

    @pytest.mark.parametrize("engine", ["usd", "sds"])
    def test_estimate_stabilizes(self, world, oracles, engine):
        theta = np.full((world.n, world.n), 0.5)
        cfg = DistillConfig(engine=engine)
        small = residual_variance(cfg, oracles, theta, world.poses[1], 600, 1000, 1)
        large = residual_variance(cfg, oracles, theta, world.poses[1], 600, 10_000, 2)
        assert small == pytest.approx(large, rel=0.1)

    def test_needs_two_draws(self, world, oracles):
        with pytest.raises(ValueError):
            residual_variance(DistillConfig(), oracles, np.zeros((world.n, world.n)), 0.0, 600, 1, 0)
