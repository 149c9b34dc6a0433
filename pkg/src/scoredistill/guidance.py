"""Classifier-free guidance combiners and a DDIM/DDPM reverse sampler."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule, forward_diffuse

DEFAULT_OMEGA = 7.5


class Combiner(str, Enum):
    GENERAL = "general"
    COLLAPSED = "collapsed"
    RECTIFIED = "rectified"


@dataclass(frozen=True)
class GuidanceConfig:
    alpha1: float = DEFAULT_OMEGA
    alpha2: float = DEFAULT_OMEGA
    omega: float = DEFAULT_OMEGA
    combiner: Combiner = Combiner.COLLAPSED

    def __post_init__(self):
        object.__setattr__(self, "combiner", Combiner(self.combiner))
        if not all(np.isfinite([self.alpha1, self.alpha2, self.omega])):
            raise ValueError("guidance scales must be finite")


def _same_shape(*arrays):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if any(a.shape != arrays[0].shape for a in arrays[1:]):
        raise ValueError(f"dimension mismatch: {[a.shape for a in arrays]}")
    return arrays


def cfg_general(eps_cIcP, eps_cP, eps_uncond, alpha1, alpha2) -> np.ndarray:
    """Two-scale guidance: image term scaled by alpha1, pose term by alpha2."""
    a, b, u = _same_shape(eps_cIcP, eps_cP, eps_uncond)
    return alpha1 * (a - b) + alpha2 * (b - u) + u


def cfg_collapsed(eps_cond, eps_uncond, omega) -> np.ndarray:
    c, u = _same_shape(eps_cond, eps_uncond)
    return omega * (c - u) + u


def cfg_rectified(eps_cond_finetuned, eps_uncond_base, omega) -> np.ndarray:
    """Conditional branch from the fine-tuned model, unconditional from the base."""
    return cfg_collapsed(eps_cond_finetuned, eps_uncond_base, omega)


def guided_predictor(cond, uncond, omega: float = DEFAULT_OMEGA,
                     cond_pose=None, cfg: GuidanceConfig | None = None):
    """Wrap epsilon predictors into one guided callable ``f(z_t, t, sched)``.

    ``uncond`` is the fine-tuned unconditional for the collapsed combiner and
    the base-model unconditional for the rectified one; the arithmetic is the
    same.  The general combiner additionally needs ``cond_pose``, the
    pose-only conditional predictor.
    """
    cfg = cfg or GuidanceConfig(omega=omega, alpha1=omega, alpha2=omega)

    if cfg.combiner is Combiner.GENERAL:
        if cond_pose is None:
            raise ValueError("general combiner needs a pose-only predictor")

        def f(z_t, t, sched):
            return cfg_general(cond(z_t, t, sched), cond_pose(z_t, t, sched),
                               uncond(z_t, t, sched), cfg.alpha1, cfg.alpha2)
    else:
        def f(z_t, t, sched):
            return cfg_collapsed(cond(z_t, t, sched), uncond(z_t, t, sched),
                                 cfg.omega)
    return f


@dataclass(frozen=True)
class FromPureNoise:
    dim: int


@dataclass(frozen=True)
class FromNoisedLatent:
    z0: np.ndarray
    T: int


def sampling_timesteps(T: int, steps: int | None) -> np.ndarray:
    if steps is None or steps >= T:
        return np.arange(T, 0, -1)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]
    return ts


def ddpm_sample(predictor: Callable, sched: NoiseSchedule, start, steps=None,
                seed: int = 0, eta: float = 0.0, return_trace: bool = False):
    """Run the reverse chain down to t = 0.

    ``eta = 0`` is the deterministic DDIM update; ``eta = 1`` is ancestral
    DDPM sampling with the posterior variance.  For ``FromNoisedLatent`` the
    chain runs over t = T..1 starting from the noised clean latent.
    """
    rng = np.random.default_rng(seed)
    if isinstance(start, FromNoisedLatent):
        T = int(start.T)
        if not 1 <= T <= sched.t_max:
            raise ValueError(f"start level {T} outside [1, {sched.t_max}]")
        z0 = np.asarray(start.z0, dtype=np.float64)
        z = forward_diffuse(z0, T, rng.standard_normal(z0.shape), sched)
    elif isinstance(start, FromPureNoise):
        T = sched.t_max
        z = rng.standard_normal(start.dim)
    else:
        raise TypeError(f"unknown start state {start!r}")
    if steps is not None and steps > sched.t_max:
        raise ValueError("steps exceeds t_max")

    ts = sampling_timesteps(T, steps)
    trace = [z.copy()] if return_trace else None
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        abar = sched.alpha_bar(t)
        abar_prev = sched.alpha_bar(t_prev) if t_prev > 0 else 1.0
        eps_hat = predictor(z, int(t), sched)
        x0 = (z - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        var = eta ** 2 * (1.0 - abar_prev) / (1.0 - abar) * (1.0 - abar / abar_prev)
        dir_coef = np.sqrt(max(1.0 - abar_prev - var, 0.0))
        z = np.sqrt(abar_prev) * x0 + dir_coef * eps_hat
        if var > 0:
            z = z + np.sqrt(var) * rng.standard_normal(z.shape)
        if return_trace:
            trace.append(z.copy())
    return (z, trace) if return_trace else z
