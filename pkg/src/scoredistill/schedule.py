"""Discrete noise schedules, the forward diffusion map and timestep annealing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates and cumulative signal fractions.

    Timesteps are 1-indexed: ``alpha_bar(t)`` reads ``alpha_bars[t - 1]``.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        self.betas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    @property
    def t_max(self) -> int:
        return len(self.betas)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [1, {self.t_max}]")
        return t

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_t(t) - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def sigma(self, t: int) -> float:
        """Noise standard deviation sqrt(1 - alpha_bar) at step t."""
        return float(np.sqrt(1.0 - self.alpha_bar(t)))


def make_linear_schedule(t_max: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if int(t_max) != t_max or t_max < 2:
        raise ValueError(f"t_max must be an integer >= 2, got {t_max}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(t_max), dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    if not (alpha_bars[-1] > 0 and np.all(np.diff(alpha_bars) < 0)):
        raise ValueError("schedule destroys the signal to floating-point zero; "
                         "use fewer steps or smaller betas")
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Noise a clean latent to step t: sqrt(abar) * z0 + sqrt(1 - abar) * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape[-1] != eps.shape[-1]:
        raise ValueError(f"dimension mismatch: {z0.shape} vs {eps.shape}")
    abar = sched.alpha_bar(t)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


@dataclass(frozen=True)
class TimestepAnnealer:
    """Linearly shrinking [lo, hi] window, as fractions of t_max.

    Bounds move from their start to their end values over ``anneal_steps``
    optimizer steps and stay fixed afterwards.
    """

    t_hi_start: float = 0.98
    t_hi_end: float = 0.5
    t_lo_start: float = 0.02
    t_lo_end: float = 0.02
    anneal_steps: int = 500

    def __post_init__(self):
        for lo, hi in ((self.t_lo_start, self.t_hi_start),
                       (self.t_lo_end, self.t_hi_end)):
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"need 0 < lo <= hi <= 1, got lo={lo}, hi={hi}")
        if self.anneal_steps < 0:
            raise ValueError("anneal_steps must be >= 0")

    def bounds(self, opt_step: int) -> tuple[float, float]:
        if self.anneal_steps == 0:
            frac = 1.0
        else:
            frac = min(max(opt_step, 0) / self.anneal_steps, 1.0)
        lo = self.t_lo_start + frac * (self.t_lo_end - self.t_lo_start)
        hi = self.t_hi_start + frac * (self.t_hi_end - self.t_hi_start)
        return lo, hi

    @classmethod
    def for_run(cls, total_steps: int) -> "TimestepAnnealer":
        """Default window, annealed over the first half of a run."""
        return cls(anneal_steps=max(total_steps // 2, 0))

    @classmethod
    def fixed(cls, frac: float) -> "TimestepAnnealer":
        return cls(frac, frac, frac, frac, 0)


def sample_timestep(annealer: TimestepAnnealer, opt_step: int,
                    rng: np.random.Generator, t_max: int) -> int:
    if opt_step < 0:
        raise ValueError("opt_step must be >= 0")
    lo, hi = annealer.bounds(opt_step)
    u = rng.uniform(lo, hi) if hi > lo else lo
    return int(min(max(round(u * t_max), 1), t_max))
