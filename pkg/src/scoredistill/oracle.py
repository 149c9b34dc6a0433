"""Exact noise-prediction oracles built on isotropic Gaussian mixtures.

The exact oracles play the role of well-trained diffusion models: for a
mixture prior the noised density stays a mixture, so the score and the
minimum-MSE noise prediction are available in closed form.  The biased
predictors model an unconditional branch that was fine-tuned on a shifted
dataset and queried with a mismatched null embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule, forward_diffuse


@dataclass(frozen=True)
class IsotropicGaussian:
    mean: np.ndarray
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"variance must be positive, got {self.var}")


class GaussianMixture:
    """Mixture of isotropic Gaussians stored as stacked arrays.

    ``means`` has shape (K, d); ``variances`` and ``weights`` shape (K,).
    """

    def __init__(self, weights, means, variances):
        weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        variances = np.broadcast_to(
            np.asarray(variances, dtype=np.float64), weights.shape).copy()
        if weights.ndim != 1 or len(weights) == 0:
            raise ValueError("need at least one component")
        if means.shape[0] != len(weights):
            raise ValueError("means and weights disagree on component count")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) >= 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1 "
                             f"(sum={weights.sum()!r})")
        if np.any(~(variances > 0)):
            raise ValueError("component variances must be positive")
        if not np.all(np.isfinite(means)):
            raise ValueError("component means must be finite")
        self.weights = weights
        self.means = means
        self.variances = variances
        for a in (self.weights, self.means, self.variances):
            a.setflags(write=False)

    @classmethod
    def from_components(cls, weights, components):
        means = np.stack([c.mean for c in components])
        variances = np.array([c.var for c in components])
        return cls(weights, means, variances)

    @classmethod
    def single(cls, mean, var):
        return cls([1.0], np.asarray(mean, dtype=np.float64)[None, :], [var])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def components(self) -> list[IsotropicGaussian]:
        return [IsotropicGaussian(m.copy(), float(v))
                for m, v in zip(self.means, self.variances)]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[ks] + np.sqrt(self.variances[ks])[:, None] * noise

    def _log_joint(self, z):
        # (..., K) log w_k + log N(z; mu_k, s_k^2 I)
        diff = z[..., None, :] - self.means
        sq = np.einsum("...kd,...kd->...k", diff, diff)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return (logw - 0.5 * self.dim * np.log(2 * np.pi * self.variances)
                - 0.5 * sq / self.variances)

    def log_density(self, z) -> np.ndarray:
        z = _check_finite(z, self.dim)
        return logsumexp(self._log_joint(z), axis=-1)

    def responsibilities(self, z) -> np.ndarray:
        z = _check_finite(z, self.dim)
        lj = self._log_joint(z)
        lj -= lj.max(axis=-1, keepdims=True)
        r = np.exp(lj)
        return r / r.sum(axis=-1, keepdims=True)

    def score(self, z) -> np.ndarray:
        """Gradient of the log-density, sum_k r_k(z) * (mu_k - z) / s_k^2."""
        z = _check_finite(z, self.dim)
        r = self.responsibilities(z)
        coef = r / self.variances
        return coef @ self.means - coef.sum(axis=-1, keepdims=True) * z

    def score_jvp(self, z, v) -> np.ndarray:
        """Hessian of the log-density at z applied to v (the Hessian is symmetric)."""
        z = _check_finite(z, self.dim)
        v = np.asarray(v, dtype=np.float64)
        r = self.responsibilities(z)
        u = (self.means - z[..., None, :]) / self.variances[:, None]
        uv = np.einsum("...kd,...d->...k", u, v)
        s = np.einsum("...k,...kd->...d", r, u)
        return (-(r / self.variances).sum(axis=-1)[..., None] * v
                + np.einsum("...k,...kd->...d", r * uv, u)
                - s * np.einsum("...d,...d->...", s, v)[..., None])


def _check_finite(z, dim):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite latent")
    return z


def noised_mixture(gmm: GaussianMixture, t: int,
                   sched: NoiseSchedule) -> GaussianMixture:
    abar = sched.alpha_bar(t)
    return GaussianMixture(gmm.weights, np.sqrt(abar) * gmm.means,
                           abar * gmm.variances + (1.0 - abar))


def score(gmm_t: GaussianMixture, z) -> np.ndarray:
    return gmm_t.score(z)


def epsilon_star(gmm: GaussianMixture, z_t, t: int,
                 sched: NoiseSchedule) -> np.ndarray:
    """Minimum-MSE noise estimate E[eps | z_t] for data drawn from ``gmm``."""
    return -sched.sigma(t) * noised_mixture(gmm, t, sched).score(z_t)


class EpsilonPredictor:
    """Anything that maps (z_t, t, schedule) to a noise estimate."""

    kind = "abstract"

    def __call__(self, z_t, t: int, sched: NoiseSchedule) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, z_t, t: int, sched: NoiseSchedule, v) -> np.ndarray:
        """Jacobian of the prediction w.r.t. z_t applied to v."""
        raise NotImplementedError


class ExactPredictor(EpsilonPredictor):
    """Closed-form oracle for a known clean-data mixture."""

    def __init__(self, gmm: GaussianMixture, kind: str = "exact"):
        self.gmm = gmm
        self.kind = kind
        self._cache: dict[tuple[int, int], GaussianMixture] = {}

    def _noised(self, t, sched):
        key = (id(sched), int(t))
        g = self._cache.get(key)
        if g is None:
            g = self._cache[key] = noised_mixture(self.gmm, t, sched)
        return g

    def __call__(self, z_t, t, sched):
        return -sched.sigma(t) * self._noised(t, sched).score(z_t)

    def jvp(self, z_t, t, sched, v):
        return -sched.sigma(t) * self._noised(t, sched).score_jvp(z_t, v)


def ExactConditional(gmm: GaussianMixture) -> ExactPredictor:
    return ExactPredictor(gmm, "exact_conditional")


def ExactUnconditional(gmm: GaussianMixture) -> ExactPredictor:
    return ExactPredictor(gmm, "exact_unconditional")


class BiasMode(str, Enum):
    TRAIN_MATCHED = "train_matched"
    INFERENCE_ZERO = "inference_zero"


@dataclass(frozen=True)
class BiasConfig:
    """Knobs describing how a fine-tuned unconditional branch goes wrong.

    gamma: mixture weights become w**gamma (renormalized); 0 leaves them alone.
    mean_offset: added to every component mean of the prior.
    var_scale: multiplies every component variance (an under-trained,
        over-dispersed unconditional density); 1 leaves it alone.
    offset_trainmatched / offset_zero: constant residual added to the
        prediction when queried with the training-time null embedding or with
        a raw zero embedding.

    Scalar offsets expand to constant vectors of the latent dimension.
    """

    gamma: float = 2.0
    mean_offset: float | tuple = 0.05
    var_scale: float = 2.0
    offset_trainmatched: float | tuple = 0.1
    offset_zero: float | tuple = 0.3
    mode: BiasMode = BiasMode.INFERENCE_ZERO

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.var_scale > 0:
            raise ValueError("var_scale must be positive")
        object.__setattr__(self, "mode", BiasMode(self.mode))

    @classmethod
    def off(cls, mode=BiasMode.INFERENCE_ZERO) -> "BiasConfig":
        return cls(gamma=0.0, mean_offset=0.0, var_scale=1.0,
                   offset_trainmatched=0.0, offset_zero=0.0, mode=mode)

    def offset(self, mode, dim: int) -> np.ndarray:
        raw = (self.offset_trainmatched if BiasMode(mode) is BiasMode.TRAIN_MATCHED
               else self.offset_zero)
        return _as_vector(raw, dim)

    def is_off(self) -> bool:
        return (self.gamma in (0.0, 1.0) and self.var_scale == 1.0
                and not np.any(np.asarray(self.mean_offset))
                and not np.any(np.asarray(self.offset_trainmatched))
                and not np.any(np.asarray(self.offset_zero)))


def _as_vector(raw, dim):
    v = np.asarray(raw, dtype=np.float64)
    if v.ndim == 0:
        return np.full(dim, float(v))
    if v.shape != (dim,):
        raise ValueError(f"offset has shape {v.shape}, expected ({dim},)")
    return v.copy()


def domain_shift(base: GaussianMixture, cfg: BiasConfig) -> GaussianMixture:
    if cfg.gamma == 0:
        weights = base.weights
    else:
        with np.errstate(divide="ignore"):
            logw = cfg.gamma * np.log(base.weights)
        if not np.any(np.isfinite(logw)):
            raise ValueError("gamma reweighting produced all-zero weights")
        w = np.exp(logw - logw.max())
        if w.sum() == 0 or not np.isfinite(w.sum()):
            raise ValueError("gamma reweighting produced all-zero weights")
        weights = w / w.sum()
        weights = weights / weights.sum()
    means = base.means + _as_vector(cfg.mean_offset, base.dim)
    return GaussianMixture(weights, means, base.variances * cfg.var_scale)


class BiasedUnconditional(EpsilonPredictor):
    """Exact oracle of a domain-shifted prior plus a constant embedding residual."""

    def __init__(self, base: GaussianMixture, cfg: BiasConfig, mode=None):
        self.cfg = cfg
        self.mode = BiasMode(mode if mode is not None else cfg.mode)
        self.kind = f"biased_{self.mode.value}"
        self.base = base
        self.inner = ExactPredictor(domain_shift(base, cfg))
        self.offset = cfg.offset(self.mode, base.dim)

    def __call__(self, z_t, t, sched):
        return self.inner(z_t, t, sched) + self.offset

    def jvp(self, z_t, t, sched, v):
        return self.inner.jvp(z_t, t, sched, v)


def make_biased_unconditional(base: GaussianMixture, cfg: BiasConfig,
                              mode=None) -> BiasedUnconditional:
    return BiasedUnconditional(base, cfg, mode)


def noise_prediction_gap(pred, z0, t: int, n: int, sched: NoiseSchedule,
                         seed: int) -> float:
    """Mean over n noise draws of the per-coordinate RMS error of ``pred``.

    ``z0`` is either one clean latent (reused for every draw) or an (n, d)
    batch holding a fresh clean latent per draw.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z0 = np.asarray(z0, dtype=np.float64)
    d = z0.shape[-1]
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, d))
    z_t = forward_diffuse(z0, t, eps, sched)
    err = pred(z_t, t, sched) - eps
    return float(np.mean(np.linalg.norm(err, axis=-1)) / np.sqrt(d))
