"""Experiment drivers and image metrics.

Every driver returns a :class:`SweepResult`: a flat list of
``(experiment, cell, seed, metric, value)`` records plus per-cell medians.
Seed ``s`` always means world seed ``s`` *and* run seed ``s``, so cells of
one sweep are paired.  Cells run in a process pool whose size comes from the
``SCOREDISTILL_WORKERS`` environment variable; results are re-sorted by job
index before anything is aggregated, so the worker count never changes the
output.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, NamedTuple

import numpy as np
from scipy import ndimage

from . import guidance
from .distill import (DistillConfig, Engine, build_oracles, distill_run,
                      residual_variance)
from .oracle import (BiasConfig, BiasMode, ExactPredictor, GaussianMixture,
                     make_biased_unconditional, noise_prediction_gap)
from .scene import WorldConfig, input_view, make_world, render
from .schedule import NoiseSchedule, make_linear_schedule

WORKERS_ENV = "SCOREDISTILL_WORKERS"
PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# metrics

def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for data on [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b, window: int = 7, c1: float = 0.01 ** 2,
         c2: float = 0.03 ** 2) -> float:
    """Mean local SSIM over all fully-contained ``window`` x ``window`` patches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"need two equal 2D grids, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"grid smaller than the {window}x{window} window")

    def local_mean(x):
        m = ndimage.uniform_filter(x, size=window, mode="constant")
        h = window // 2
        return m[h:x.shape[0] - h, h:x.shape[1] - h]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a ** 2
    var_b = local_mean(b * b) - mu_b ** 2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    mse: float
    ssim: float | None = None
    meta: dict = field(default_factory=dict)


def metric_report(estimate, truth, meta=None) -> MetricReport:
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mse = float(np.mean((estimate - truth) ** 2))
    s = ssim(estimate, truth) if estimate.ndim == 2 else None
    return MetricReport(psnr(estimate, truth), mse, s, dict(meta or {}))


# ---------------------------------------------------------------------------
# results

class Record(NamedTuple):
    experiment: str
    cell: str
    seed: int
    metric: str
    value: float


@dataclass
class SweepResult:
    """Records of one experiment plus per-cell aggregates of ``metric``.

    ``higher_is_better`` decides the winner; ``cells`` keeps the axis order.
    """

    experiment: str
    cells: list
    records: list
    metric: str
    higher_is_better: bool = True

    def values(self, cell: str, metric: str | None = None) -> np.ndarray:
        metric = metric or self.metric
        rows = sorted((r.seed, r.value) for r in self.records
                      if r.cell == cell and r.metric == metric)
        return np.array([v for _, v in rows])

    def median(self, cell: str, metric: str | None = None) -> float:
        return float(np.median(self.values(cell, metric)))

    def iqr(self, cell: str, metric: str | None = None) -> float:
        q75, q25 = np.percentile(self.values(cell, metric), [75, 25])
        return float(q75 - q25)

    @property
    def medians(self) -> list:
        return [self.median(c) for c in self.cells]

    @property
    def winner(self) -> int:
        m = np.array(self.medians)
        return int(np.argmax(m) if self.higher_is_better else np.argmin(m))

    def summary(self) -> dict:
        return {
            "experiment": self.experiment,
            "metric": self.metric,
            "cells": [{"cell": c, "median": self.median(c), "iqr": self.iqr(c),
                       "n": int(len(self.values(c)))} for c in self.cells],
            "winner": self.cells[self.winner],
        }


# ---------------------------------------------------------------------------
# job execution

def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def run_jobs(fn: Callable, jobs: list, workers: int | None = None) -> list:
    """Apply ``fn`` to every job, in parallel when allowed, in job order."""
    workers = worker_count() if workers is None else max(int(workers), 1)
    if workers == 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _flatten(chunks: Iterable[list]) -> list:
    return [r for chunk in chunks for r in chunk]


def _seeds(n_seeds: int, minimum: int = 1, first: int = 0) -> list:
    if n_seeds < minimum:
        raise ValueError(f"need at least {minimum} seeds, got {n_seeds}")
    return list(range(int(first), int(first) + int(n_seeds)))


# ---------------------------------------------------------------------------
# denoising benchmark and noise-gap curve

PREDICTOR_NAMES = ("exact", "train_matched", "inference_zero")


def predictor_label(name) -> str:
    return name if isinstance(name, str) else getattr(name, "label", name.__name__)


def resolve_predictor(name, prior: GaussianMixture, bias: BiasConfig, clean=None):
    """Map a predictor label to an oracle on ``prior``.

    ``exact`` is the unbiased unconditional; the two bias modes use ``bias``
    with the matching embedding offset.  A callable is treated as a factory
    ``f(prior, bias, clean) -> predictor``, which lets tests plug in doubles.
    """
    if callable(name):
        return name(prior, bias, clean)
    if name == "exact":
        return ExactPredictor(prior, "exact_unconditional")
    if name in (m.value for m in BiasMode):
        return make_biased_unconditional(prior, bias, name)
    raise ValueError(f"unknown predictor {name!r}; expected one of {PREDICTOR_NAMES}")


@dataclass(frozen=True)
class _DenoiseJob:
    seed: int
    predictors: tuple
    T_levels: tuple
    world_cfg: WorldConfig
    bias: BiasConfig
    sched_args: tuple
    eta: float


def _denoise_job(job: _DenoiseJob) -> list:
    sched = make_linear_schedule(*job.sched_args)
    world = make_world(job.seed, job.world_cfg)
    oracles = build_oracles(world, job.bias)
    pose = world.poses[np.random.default_rng([job.seed, 3]).integers(len(world.poses))]
    clean = render(world.gt, pose, world)
    out = []
    for name in job.predictors:
        pred = resolve_predictor(name, oracles.prior, job.bias, clean)
        for T in job.T_levels:
            start = guidance.FromNoisedLatent(clean, int(T))
            # same noise realisation for every predictor at this (seed, T)
            z = guidance.ddpm_sample(pred, sched, start, seed=job.seed * 1000 + int(T),
                                     eta=job.eta)
            rep = metric_report(z, clean)
            cell = f"{predictor_label(name)}@T{int(T)}"
            out.append(Record("denoise", cell, job.seed, "psnr", rep.psnr))
            out.append(Record("denoise", cell, job.seed, "mse", rep.mse))
    return out


def denoise_benchmark(predictors=PREDICTOR_NAMES, T_levels=(50, 100, 200, 300),
                      n_seeds: int = 10, sched_args=(1000, 1e-4, 0.02),
                      world_cfg: WorldConfig | None = None,
                      bias: BiasConfig | None = None, eta: float = 0.0,
                      first_seed: int = 0, workers: int | None = None) -> SweepResult:
    """Noise a true view to level T, run the reverse chain with each
    unconditional predictor, and score the recovery against the clean view."""
    if not predictors or not T_levels:
        raise ValueError("need at least one predictor and one noise level")
    world_cfg = world_cfg or WorldConfig()
    bias = bias if bias is not None else BiasConfig()
    jobs = [_DenoiseJob(s, tuple(predictors), tuple(int(t) for t in T_levels),
                        world_cfg, bias, tuple(sched_args), float(eta))
            for s in _seeds(n_seeds, first=first_seed)]
    records = _flatten(run_jobs(_denoise_job, jobs, workers))
    cells = [f"{predictor_label(p)}@T{int(t)}" for p in predictors for t in T_levels]
    return SweepResult("denoise", cells, records, "psnr")


def gap_curve(predictors=PREDICTOR_NAMES, T_levels=(50, 100, 200, 300),
              n: int = 100_000, seed: int = 0, dim: int = 48,
              bias: BiasConfig | None = None,
              sched: NoiseSchedule | None = None) -> SweepResult:
    """Noise-prediction gap on the standard normal prior.

    Each of the ``n`` draws uses a fresh clean latent from N(0, I), and all
    predictors see the same draws.  A ``reference`` cell records sqrt(abar_T),
    the closed-form gap of the exact oracle.
    """
    bias = bias if bias is not None else BiasConfig()
    sched = sched or make_linear_schedule()
    prior = GaussianMixture.single(np.zeros(dim), 1.0)
    z0 = np.random.default_rng([seed, 4]).standard_normal((n, dim))
    records = []
    for name in predictors:
        pred = resolve_predictor(name, prior, bias)
        for T in T_levels:
            g = noise_prediction_gap(pred, z0, int(T), n, sched, seed=seed + int(T))
            records.append(Record("gap", name, int(T), "gap", g))
    for T in T_levels:
        records.append(Record("gap", "reference", int(T), "gap",
                              float(np.sqrt(sched.alpha_bar(int(T))))))
    return SweepResult("gap", list(predictors) + ["reference"], records, "gap",
                       higher_is_better=False)


# ---------------------------------------------------------------------------
# distillation sweeps

def parse_engine(label: str) -> tuple[dict, bool]:
    """Turn an engine label into DistillConfig changes and a bias switch.

    Grammar: ``name[:lambda][+rv<beta>][@off]``, e.g. ``lambda:0.5``,
    ``usd+rv0.1`` or ``sds@off`` (bias disabled).
    """
    bias_on = True
    body = label
    if body.endswith("@off"):
        body, bias_on = body[:-4], False
    changes = {}
    if "+rv" in body:
        body, beta = body.split("+rv", 1)
        changes["beta_rv"] = float(beta)
    if ":" in body:
        body, lam = body.split(":", 1)
        changes["lam"] = float(lam)
    if body == "noop":
        changes["steps"] = 0
        body = "usd"
    changes["engine"] = Engine(body)
    return changes, bias_on


@dataclass(frozen=True)
class _DistillJob:
    experiment: str
    cell: str
    seed: int
    changes: tuple
    bias_on: bool
    base: DistillConfig
    world_cfg: WorldConfig
    bias: BiasConfig
    sched_args: tuple
    variance_n: int = 0
    variance_t_frac: float = 0.6


def _distill_job(job: _DistillJob) -> list:
    sched = make_linear_schedule(*job.sched_args)
    world = make_world(job.seed, job.world_cfg)
    bias = job.bias if job.bias_on else BiasConfig.off()
    oracles = build_oracles(world, bias)
    cfg = replace(job.base, seed=job.seed, **dict(job.changes))
    run = distill_run(world, oracles, cfg, sched)
    rep = metric_report(run.theta.clip(0.0, 1.0), world.gt)
    y, pose = input_view(world)
    iv_err = float(np.linalg.norm(render(run.theta, pose, world) - y) / np.sqrt(world.d))
    out = [Record(job.experiment, job.cell, job.seed, "psnr", rep.psnr),
           Record(job.experiment, job.cell, job.seed, "ssim", rep.ssim),
           Record(job.experiment, job.cell, job.seed, "mse", rep.mse),
           Record(job.experiment, job.cell, job.seed, "input_view_err", iv_err)]
    if job.variance_n >= 2:
        theta0 = np.full((world.n, world.n), job.base.init_value)
        t = max(1, int(round(job.variance_t_frac * sched.t_max)))
        v = residual_variance(cfg, oracles, theta0, world.poses[1], t,
                              job.variance_n, job.seed, sched)
        out.append(Record(job.experiment, job.cell, job.seed, "residual_variance", v))
    return out


def _distill_sweep(experiment, cells, n_seeds, base, world_cfg, bias, sched_args,
                   workers, minimum_seeds=1, variance_n=0, first_seed=0,
                   variance_t_frac=0.6) -> SweepResult:
    base = base or DistillConfig()
    world_cfg = world_cfg or WorldConfig()
    bias = bias if bias is not None else BiasConfig()
    jobs = []
    for label, changes, bias_on in cells:
        for s in _seeds(n_seeds, minimum_seeds, first_seed):
            jobs.append(_DistillJob(experiment, label, s, tuple(changes.items()),
                                    bias_on, base, world_cfg, bias,
                                    tuple(sched_args), variance_n, variance_t_frac))
    records = _flatten(run_jobs(_distill_job, jobs, workers))
    return SweepResult(experiment, [c[0] for c in cells], records, "psnr")


def lambda_sweep(lambdas=(0.0, 0.5, 1.0), base_config: DistillConfig | None = None,
                 n_seeds: int = 10, world_cfg=None, bias=None,
                 sched_args=(1000, 1e-4, 0.02), first_seed=0,
                 workers=None) -> SweepResult:
    """Lambda-family runs with the biased fine-tuned unconditional."""
    cells = [(f"lambda={float(lam):g}", {"engine": Engine.LAMBDA, "lam": float(lam)}, True)
             for lam in lambdas]
    return _distill_sweep("lambda_sweep", cells, n_seeds, base_config, world_cfg,
                          bias, sched_args, workers, minimum_seeds=5,
                          first_seed=first_seed)


def alpha_sweep(alpha_grid, base_config: DistillConfig | None = None,
                n_seeds: int = 10, world_cfg=None, bias=None,
                sched_args=(1000, 1e-4, 0.02), first_seed=0,
                workers=None) -> SweepResult:
    """Two-scale guidance runs over (alpha1, alpha2) pairs."""
    cells = [(f"a1={float(a1):g},a2={float(a2):g}",
              {"engine": Engine.GENERAL, "alpha1": float(a1), "alpha2": float(a2)},
              True) for a1, a2 in alpha_grid]
    return _distill_sweep("alpha_sweep", cells, n_seeds, base_config, world_cfg,
                          bias, sched_args, workers, minimum_seeds=5,
                          first_seed=first_seed)


def alpha_grid_around(omega: float = guidance.DEFAULT_OMEGA, step: float = 2.5):
    vals = (omega - step, omega, omega + step)
    return [(a1, a2) for a1 in vals for a2 in vals]


def engine_compare(engines=("sds", "usd", "dds", "csd", "vsd_lite"),
                   base_config: DistillConfig | None = None, n_seeds: int = 10,
                   world_cfg=None, bias=None, sched_args=(1000, 1e-4, 0.02),
                   variance_n: int = 0, variance_t_frac: float = 0.6,
                   first_seed: int = 0, workers=None) -> SweepResult:
    """Paired-seed shoot-out between engine labels (see :func:`parse_engine`)."""
    cells = []
    for label in engines:
        changes, bias_on = parse_engine(label)
        cells.append((label, changes, bias_on))
    return _distill_sweep("engine_compare", cells, n_seeds, base_config, world_cfg,
                          bias, sched_args, workers, variance_n=variance_n,
                          first_seed=first_seed, variance_t_frac=variance_t_frac)


# ---------------------------------------------------------------------------
# guided sampling comparison

@dataclass(frozen=True)
class _SamplerJob:
    seed: int
    combiners: tuple
    omega: float
    steps: int
    eta: float
    world_seed: int
    world_cfg: WorldConfig
    bias: BiasConfig
    sched_args: tuple
    pose_offset: float


def _sampler_job(job: _SamplerJob) -> list:
    sched = make_linear_schedule(*job.sched_args)
    world = make_world(job.world_seed, job.world_cfg)
    oracle_sets = {True: build_oracles(world, job.bias)}
    pose = world.input_pose + job.pose_offset
    truth = render(world.gt, pose, world)
    out = []
    for label in job.combiners:
        name, bias_on = _split_off(label)
        if bias_on not in oracle_sets:
            oracle_sets[bias_on] = build_oracles(world, BiasConfig.off())
        oracles = oracle_sets[bias_on]
        uncond = (oracles.uncond_finetuned if name == "collapsed"
                  else oracles.uncond_base)
        f = guidance.guided_predictor(oracles.cond(pose), uncond, job.omega)
        z = guidance.ddpm_sample(f, sched, guidance.FromPureNoise(world.d),
                                 steps=job.steps, seed=job.seed, eta=job.eta)
        dist = float(np.linalg.norm(z - truth) / np.sqrt(world.d))
        out.append(Record("sampler_compare", label, job.seed, "distance", dist))
    return out


def _split_off(label: str) -> tuple[str, bool]:
    if label.endswith("@off"):
        return label[:-4], False
    return label, True


def sampler_compare(combiners=("collapsed", "rectified"), n_seeds: int = 50,
                    omega: float = guidance.DEFAULT_OMEGA, steps: int = 50,
                    eta: float = 0.0, world_seed: int = 0, world_cfg=None,
                    bias=None, sched_args=(1000, 1e-4, 0.02),
                    pose_offset: float = np.pi / 16, first_seed: int = 0,
                    workers=None) -> SweepResult:
    """Guided sampling from pure noise toward a held-out pose.

    The pose sits half-way between two training poses.  ``collapsed`` pairs
    the conditional with the fine-tuned (biased) unconditional, ``rectified``
    with the exact base unconditional.  A ``@off`` suffix runs the combiner
    with the bias disabled.  The metric is the per-coordinate RMS distance to
    the true view.
    """
    for c in combiners:
        if _split_off(c)[0] not in ("collapsed", "rectified"):
            raise ValueError(f"unknown combiner {c!r}")
    world_cfg = world_cfg or WorldConfig()
    bias = bias if bias is not None else BiasConfig()
    jobs = [_SamplerJob(s, tuple(combiners), float(omega), int(steps), float(eta),
                        int(world_seed), world_cfg, bias, tuple(sched_args),
                        float(pose_offset))
            for s in _seeds(n_seeds, first=first_seed)]
    records = _flatten(run_jobs(_sampler_job, jobs, workers))
    return SweepResult("sampler_compare", list(combiners), records, "distance",
                       higher_is_better=False)
