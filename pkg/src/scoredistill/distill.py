"""Score-distillation gradient engines and the object-grid optimizer loop."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import guidance
from .oracle import (BiasConfig, ExactPredictor, GaussianMixture,
                     make_biased_unconditional)
from .scene import (World, conditional_gmm, input_view, pose_marginal_gmm,
                    world_prior)
from .schedule import (NoiseSchedule, TimestepAnnealer, forward_diffuse,
                       make_linear_schedule, sample_timestep)


class NumericalAbort(RuntimeError):
    """Raised when a residual or the parameters stop being finite."""


# ---------------------------------------------------------------------------
# residuals

def _same(*arrays):
    return guidance._same_shape(*arrays)


def sds_residual(eps_cfg, eps) -> np.ndarray:
    a, e = _same(eps_cfg, eps)
    return a - e


def lambda_residual(eps_cond, eps_psi, eps, omega, lam) -> np.ndarray:
    c, p, e = _same(eps_cond, eps_psi, eps)
    return omega * (c - p) + lam * (p - e)


def usd_residual(eps_cond, eps_psi, omega) -> np.ndarray:
    c, p = _same(eps_cond, eps_psi)
    return omega * (c - p)


def dds_residual(eps_cond_target, eps_cond_source, omega) -> np.ndarray:
    a, b = _same(eps_cond_target, eps_cond_source)
    return omega * (a - b)


class VsdAux:
    """Per-timestep-bucket affine noise predictors fitted online.

    Stands in for the LoRA model of variational score distillation: it only
    ever sees noised renders of the current parameters, so it learns what
    the unconditional noise looks like on them.
    """

    def __init__(self, dim: int, t_max: int, n_buckets: int = 8, rate: float = 0.1):
        if n_buckets < 1:
            raise ValueError("need at least one bucket")
        self.dim = dim
        self.rate = rate
        self.edges = np.linspace(0, t_max, n_buckets + 1).round().astype(int)
        self.A = np.zeros((n_buckets, dim, dim))
        self.c = np.zeros((n_buckets, dim))

    @property
    def n_buckets(self) -> int:
        return len(self.c)

    def bucket(self, t: int) -> int:
        return int(np.clip(np.searchsorted(self.edges, t, side="left") - 1,
                           0, self.n_buckets - 1))

    def __call__(self, z_t, t):
        b = self.bucket(t)
        return self.A[b] @ z_t + self.c[b]

    def update(self, z_t, t, eps):
        """One normalized least-mean-squares step towards predicting eps."""
        b = self.bucket(t)
        err = self.A[b] @ z_t + self.c[b] - eps
        step = self.rate / (1.0 + z_t @ z_t)
        self.A[b] -= step * np.outer(err, z_t)
        self.c[b] -= step * err


def vsd_lite_residual(eps_cond, eps_uncond, aux: VsdAux | None, z_t, t,
                      omega) -> np.ndarray:
    if aux is None:
        raise ValueError("VSD-lite needs an initialized auxiliary predictor")
    c, u = _same(eps_cond, eps_uncond)
    return omega * (c - u) + (u - aux(z_t, t))


# ---------------------------------------------------------------------------
# oracles for one world

@dataclass
class Oracles:
    """Every noise predictor a distillation run may query.

    uncond_base is the exact unconditional of the world prior (the
    base-model analog); uncond_finetuned is the biased fine-tuned analog.
    """

    world: World
    uncond_base: ExactPredictor
    uncond_finetuned: object
    prior: GaussianMixture
    _cond: dict = field(default_factory=dict, repr=False)
    _pose: dict = field(default_factory=dict, repr=False)
    _source: dict = field(default_factory=dict, repr=False)

    def cond(self, pose) -> ExactPredictor:
        key = round(float(pose), 12)
        if key not in self._cond:
            self._cond[key] = ExactPredictor(conditional_gmm(self.world, pose),
                                             "exact_conditional")
        return self._cond[key]

    def cond_pose(self, pose) -> ExactPredictor:
        key = round(float(pose), 12)
        if key not in self._pose:
            self._pose[key] = ExactPredictor(pose_marginal_gmm(self.world, pose),
                                             "pose_marginal")
        return self._pose[key]

    def dds_source(self, pose, z) -> ExactPredictor:
        """Conditional oracle centred on the jittered mode nearest ``z``."""
        gmm = self.cond(pose).gmm
        if gmm.n_components == 1:
            return self.cond_pose(pose)
        alt = gmm.means[1:]
        k = int(np.argmin(np.sum((alt - z) ** 2, axis=1))) + 1
        key = (round(float(pose), 12), k)
        if key not in self._source:
            self._source[key] = ExactPredictor(
                GaussianMixture.single(gmm.means[k], gmm.variances[k]), "dds_source")
        return self._source[key]


def build_oracles(world: World, bias: BiasConfig | None = None) -> Oracles:
    bias = bias if bias is not None else BiasConfig()
    prior = world_prior(world)
    base = ExactPredictor(prior, "exact_unconditional")
    finetuned = make_biased_unconditional(prior, bias, bias.mode)
    return Oracles(world, base, finetuned, prior)


# ---------------------------------------------------------------------------
# configuration

class Engine(str, Enum):
    SDS = "sds"
    LAMBDA = "lambda"
    USD = "usd"
    DDS = "dds"
    CSD = "csd"
    VSD_LITE = "vsd_lite"
    GENERAL = "general"  # two-scale SDS used by the alpha ablation


class Weighting(str, Enum):
    UNIFORM = "uniform"
    ONE_MINUS_ALPHA_BAR = "one_minus_alpha_bar"


@dataclass(frozen=True)
class AdaptiveMoment:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


@dataclass(frozen=True)
class PlainSGD:
    pass


@dataclass(frozen=True)
class DistillConfig:
    engine: Engine = Engine.USD
    omega: float = guidance.DEFAULT_OMEGA
    lam: float = 1.0
    alpha1: float = guidance.DEFAULT_OMEGA
    alpha2: float = guidance.DEFAULT_OMEGA
    wt_kind: Weighting = Weighting.UNIFORM
    include_sqrt_alpha_in_chain: bool = True
    steps: int = 800
    learning_rate: float = 0.01
    optimizer: AdaptiveMoment | PlainSGD = field(default_factory=AdaptiveMoment)
    annealer: TimestepAnnealer | None = None
    seed: int = 0
    beta_rv: float = 0.0
    rv_shared_noise: bool = True
    init_value: float = 0.5
    vsd_buckets: int = 8
    vsd_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "engine", Engine(self.engine))
        object.__setattr__(self, "wt_kind", Weighting(self.wt_kind))
        if self.engine is Engine.LAMBDA and not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    def timestep_annealer(self) -> TimestepAnnealer:
        return self.annealer or TimestepAnnealer.for_run(self.steps)

    def canonical(self) -> "DistillConfig":
        """CSD is the lambda = 0 member of the lambda family."""
        if self.engine is Engine.CSD:
            return replace(self, engine=Engine.LAMBDA, lam=0.0)
        return self


def weight(t: int, sched: NoiseSchedule, kind: Weighting) -> float:
    if kind is Weighting.UNIFORM:
        return 1.0
    return 1.0 - sched.alpha_bar(t)


# ---------------------------------------------------------------------------
# one residual evaluation

def engine_residual(cfg: DistillConfig, oracles: Oracles, pose, z, z_t, t, eps,
                    sched: NoiseSchedule, aux: VsdAux | None = None) -> np.ndarray:
    cfg = cfg.canonical()
    eng = cfg.engine
    cond = oracles.cond(pose)(z_t, t, sched)
    if eng is Engine.USD:
        return usd_residual(cond, oracles.uncond_base(z_t, t, sched), cfg.omega)
    if eng is Engine.SDS:
        eps_cfg = guidance.cfg_collapsed(
            cond, oracles.uncond_finetuned(z_t, t, sched), cfg.omega)
        return sds_residual(eps_cfg, eps)
    if eng is Engine.LAMBDA:
        return lambda_residual(cond, oracles.uncond_finetuned(z_t, t, sched), eps,
                               cfg.omega, cfg.lam)
    if eng is Engine.GENERAL:
        eps_cfg = guidance.cfg_general(
            cond, oracles.cond_pose(pose)(z_t, t, sched),
            oracles.uncond_finetuned(z_t, t, sched), cfg.alpha1, cfg.alpha2)
        return sds_residual(eps_cfg, eps)
    if eng is Engine.DDS:
        src = oracles.dds_source(pose, z)(z_t, t, sched)
        return dds_residual(cond, src, cfg.omega)
    if eng is Engine.VSD_LITE:
        return vsd_lite_residual(cond, oracles.uncond_finetuned(z_t, t, sched),
                                 aux, z_t, t, cfg.omega)
    raise ValueError(f"unknown engine {eng}")


# ---------------------------------------------------------------------------
# reference-view loss

def reference_view_loss(theta, world: World, t: int, seed: int,
                        sched: NoiseSchedule, predictor=None,
                        shared_noise: bool = True, target=None):
    """Noise-level discrepancy between the render at the input pose and the
    input view, and its gradient w.r.t. the grid.

    The noised input view is treated as a constant target.
    """
    t = sched.check_t(t)
    predictor = predictor or ExactPredictor(world_prior(world))
    theta = np.asarray(theta, dtype=np.float64)
    if target is None:
        target, pose = input_view(world)
    else:
        pose = world.input_pose
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(world.d)
    eps_y = eps if shared_noise else rng.standard_normal(world.d)
    op = world.operator(pose)
    z_star = forward_diffuse(op.matrix @ theta.ravel(), t, eps, sched)
    y_t = forward_diffuse(target, t, eps_y, sched)
    diff = predictor(z_star, t, sched) - predictor(y_t, t, sched)
    loss = float(diff @ diff)
    g_latent = 2.0 * np.sqrt(sched.alpha_bar(t)) * predictor.jvp(z_star, t, sched, diff)
    grad = (op.matrix.T @ g_latent).reshape(theta.shape)
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer loop

@dataclass
class DistillRun:
    config: DistillConfig
    steps: np.ndarray
    timesteps: np.ndarray
    residual_norms: np.ndarray
    psnrs: np.ndarray
    theta: np.ndarray
    gt: np.ndarray = field(repr=False)

    @property
    def final_psnr(self) -> float:
        return _grid_psnr(self.theta, self.gt)

    def trajectory_rows(self):
        for s, t, r, p in zip(self.steps, self.timesteps, self.residual_norms,
                              self.psnrs):
            yield int(s), int(t), float(r), float(p)


class _Adam:
    def __init__(self, shape, lr, opt: AdaptiveMoment):
        self.lr, self.opt = lr, opt
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.k = 0

    def step(self, theta, g):
        o = self.opt
        self.k += 1
        self.m = o.beta1 * self.m + (1 - o.beta1) * g
        self.v = o.beta2 * self.v + (1 - o.beta2) * g * g
        mh = self.m / (1 - o.beta1 ** self.k)
        vh = self.v / (1 - o.beta2 ** self.k)
        return theta - self.lr * mh / (np.sqrt(vh) + o.eps)


class _SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, g):
        return theta - self.lr * g


def _grid_psnr(theta, gt):
    mse = float(np.mean((np.clip(theta, 0.0, 1.0) - gt) ** 2))
    return 99.0 if mse < 1e-10 else min(99.0, 10.0 * np.log10(1.0 / mse))


def distill_run(world: World, oracles: Oracles, config: DistillConfig,
                sched: NoiseSchedule | None = None,
                theta0: np.ndarray | None = None) -> DistillRun:
    sched = sched or make_linear_schedule()
    cfg = config.canonical()
    rng = np.random.default_rng([cfg.seed, world.seed])
    annealer = cfg.timestep_annealer()
    n = world.n
    theta = (np.full((n, n), cfg.init_value) if theta0 is None
             else np.array(theta0, dtype=np.float64))
    opt = (_SGD(cfg.learning_rate) if isinstance(cfg.optimizer, PlainSGD)
           else _Adam(theta.size, cfg.learning_rate, cfg.optimizer))
    aux = (VsdAux(world.d, sched.t_max, cfg.vsd_buckets, cfg.vsd_rate)
           if cfg.engine is Engine.VSD_LITE else None)
    poses = world.poses
    target = input_view(world)[0] if cfg.beta_rv > 0 else None
    rv_pred = oracles.uncond_base

    steps = np.arange(cfg.steps)
    ts = np.zeros(cfg.steps, dtype=int)
    rnorms = np.zeros(cfg.steps)
    psnrs = np.zeros(cfg.steps)
    for k in range(cfg.steps):
        pose = poses[rng.integers(len(poses))]
        t = sample_timestep(annealer, k, rng, sched.t_max)
        eps = rng.standard_normal(world.d)
        op = world.operator(pose)
        z = op.matrix @ theta.ravel()
        z_t = forward_diffuse(z, t, eps, sched)
        r = engine_residual(cfg, oracles, pose, z, z_t, t, eps, sched, aux)
        if not np.all(np.isfinite(r)):
            raise NumericalAbort(f"non-finite residual at step {k} (t={t}, "
                                 f"engine={cfg.engine.value})")
        scale = weight(t, sched, cfg.wt_kind)
        if cfg.include_sqrt_alpha_in_chain:
            scale *= np.sqrt(sched.alpha_bar(t))
        g = scale * (op.matrix.T @ r)
        if cfg.beta_rv > 0:
            rv_seed = int(rng.integers(2 ** 63))
            _, g_rv = reference_view_loss(theta, world, t, rv_seed, sched, rv_pred,
                                          cfg.rv_shared_noise, target)
            g = g + cfg.beta_rv * weight(t, sched, cfg.wt_kind) * g_rv.ravel()
        if aux is not None:
            aux.update(z_t, t, eps)
        theta = opt.step(theta.ravel(), g).reshape(n, n)
        if not np.all(np.isfinite(theta)):
            raise NumericalAbort(f"parameters became non-finite at step {k}")
        ts[k] = t
        rnorms[k] = float(np.linalg.norm(r))
        psnrs[k] = _grid_psnr(theta, world.gt)
    return DistillRun(config, steps, ts, rnorms, psnrs, theta, world.gt)


def residual_variance(cfg: DistillConfig, oracles: Oracles, theta, pose, t: int,
                      n: int, seed: int, sched: NoiseSchedule | None = None,
                      fixed_z_t: bool = False) -> float:
    """Per-coordinate variance of the engine residual over fresh noise draws."""
    if n < 2:
        raise ValueError("n must be >= 2")
    sched = sched or make_linear_schedule()
    world = oracles.world
    rng = np.random.default_rng(seed)
    op = world.operator(pose)
    z = op.matrix @ np.asarray(theta, dtype=np.float64).ravel()
    eps = rng.standard_normal((n, world.d))
    z_t = forward_diffuse(z, t, eps, sched)
    if fixed_z_t:
        z_t = np.broadcast_to(z_t[0], z_t.shape)
    cfg = cfg.canonical()
    if cfg.engine is Engine.VSD_LITE:
        aux = VsdAux(world.d, sched.t_max, cfg.vsd_buckets, cfg.vsd_rate)
        res = np.stack([engine_residual(cfg, oracles, pose, z, z_t[i], t, eps[i],
                                        sched, aux) for i in range(n)])
    elif cfg.engine is Engine.DDS:
        res = np.stack([engine_residual(cfg, oracles, pose, z, z_t[i], t, eps[i],
                                        sched) for i in range(n)])
    else:
        res = engine_residual(cfg, oracles, pose, z, z_t, t, eps, sched)
    return float(np.mean(np.var(res, axis=0, ddof=1)))
