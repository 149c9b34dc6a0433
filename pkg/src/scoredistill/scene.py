"""Toy multi-view world: a 2D intensity grid seen through parallel projections.

The grid's pixel centres span the unit square [-1/2, 1/2]^2 and the image is
the bilinear interpolant of the pixel values.  A view at angle ``phi`` is the
set of ``d`` line integrals of that interpolant along parallel rays with
direction (-sin phi, cos phi), offset along (cos phi, sin phi).  Along a ray
segment inside one grid cell the interpolant is quadratic, so Simpson's rule
per segment gives the integral exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .oracle import GaussianMixture

TWO_PI = 2.0 * np.pi


def canonical_pose(angle: float) -> float:
    a = float(angle) % TWO_PI
    return 0.0 if a >= TWO_PI else a


def ray_offsets(d: int) -> np.ndarray:
    half_diag = np.sqrt(0.5)
    edges = np.linspace(-half_diag, half_diag, d + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def _ray_weights(n: int, p0: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, float]:
    """Line-integral weights (n*n,) of the bilinear image along p0 + tau*u."""
    w = np.zeros(n * n)
    lo, hi = -0.5, 0.5
    t_in, t_out = -np.inf, np.inf
    for k in range(2):
        if abs(u[k]) < 1e-15:
            if not lo <= p0[k] <= hi:
                return w, 0.0
            continue
        a, b = (lo - p0[k]) / u[k], (hi - p0[k]) / u[k]
        t_in, t_out = max(t_in, min(a, b)), min(t_out, max(a, b))
    if not t_out > t_in:
        return w, 0.0

    h = 1.0 / (n - 1)
    lines = -0.5 + h * np.arange(n)
    cuts = [np.array([t_in, t_out])]
    for k in range(2):
        if abs(u[k]) > 1e-15:
            tc = (lines - p0[k]) / u[k]
            cuts.append(tc[(tc > t_in) & (tc < t_out)])
    ts = np.unique(np.concatenate(cuts))
    ts = ts[np.concatenate(([True], np.diff(ts) > 1e-14))]
    a, b = ts[:-1], ts[1:]
    mid = 0.5 * (a + b)
    # cell index from the segment midpoint; x -> column j, y -> row i
    pm = p0 + mid[:, None] * u
    cell = np.clip(np.floor((pm + 0.5) / h).astype(int), 0, n - 2)
    length = b - a
    for tau, coef in ((a, 1.0), (mid, 4.0), (b, 1.0)):
        p = p0 + tau[:, None] * u
        f = (p + 0.5) / h - cell  # fractional position within the cell
        fx, fy = f[:, 0], f[:, 1]
        j, i = cell[:, 0], cell[:, 1]
        c = coef * length / 6.0
        np.add.at(w, i * n + j, c * (1 - fx) * (1 - fy))
        np.add.at(w, i * n + j + 1, c * fx * (1 - fy))
        np.add.at(w, (i + 1) * n + j, c * (1 - fx) * fy)
        np.add.at(w, (i + 1) * n + j + 1, c * fx * fy)
    return w, float(t_out - t_in)


@lru_cache(maxsize=4096)
def _operator_cached(angle_key: float, n: int, d: int):
    phi = angle_key
    e = np.array([np.cos(phi), np.sin(phi)])
    u = np.array([-np.sin(phi), np.cos(phi)])
    rows, lengths = [], []
    for s in ray_offsets(d):
        w, length = _ray_weights(n, s * e, u)
        rows.append(w)
        lengths.append(length)
    m = np.array(rows)
    m.setflags(write=False)
    lens = np.array(lengths)
    lens.setflags(write=False)
    return m, lens


@dataclass(frozen=True)
class ViewOperator:
    """d x n^2 ray-integration matrix for one pose."""

    matrix: np.ndarray
    lengths: np.ndarray
    pose: float


def view_operator(pose: float, n: int, d: int) -> ViewOperator:
    if n < 2 or d < 1:
        raise ValueError("need n >= 2 and d >= 1")
    a = canonical_pose(pose)
    m, lens = _operator_cached(round(a, 12), int(n), int(d))
    return ViewOperator(m, lens, a)


def march_ray_integral(image: np.ndarray, p0, u, step: float = 1e-3) -> float:
    """Brute-force midpoint-rule line integral of the bilinear image."""
    n = image.shape[0]
    h = 1.0 / (n - 1)
    taus = np.arange(-1.0 + step / 2, 1.0, step)
    p = np.asarray(p0)[None, :] + taus[:, None] * np.asarray(u)[None, :]
    inside = np.all(np.abs(p) <= 0.5, axis=1)
    p = p[inside]
    # map_coordinates wants (row, col) = (y, x)
    coords = np.stack([(p[:, 1] + 0.5) / h, (p[:, 0] + 0.5) / h])
    vals = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    return float(vals.sum() * step)


@dataclass(frozen=True)
class WorldConfig:
    n: int = 32
    d: int = 48
    n_poses: int = 16
    input_pose: float = 0.0
    sigma_c: float = 0.05
    k_modes: int = 3
    jitter: float = 2.0
    mode1_weight: float = 0.6
    n_distractors: int = 7
    prior_sigma: float = 0.5
    n_rects: int = 3
    n_discs: int = 2

    def __post_init__(self):
        if self.n < 8 or self.d < self.n:
            raise ValueError(f"need n >= 8 and d >= n, got n={self.n}, d={self.d}")
        if self.k_modes < 1 or not self.sigma_c > 0 or self.n_poses < 1:
            raise ValueError("need k_modes >= 1, sigma_c > 0 and n_poses >= 1")
        if not 0.5 <= self.mode1_weight <= 1.0:
            raise ValueError("mode1_weight must lie in [0.5, 1]")
        if self.jitter < 0 or not self.prior_sigma > 0 or self.n_distractors < 0:
            raise ValueError("degenerate prior or jitter settings")


@dataclass(frozen=True)
class World:
    seed: int
    cfg: WorldConfig
    gt: np.ndarray
    distractors: tuple
    object_weights: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.cfg.n

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def sigma_c(self) -> float:
        return self.cfg.sigma_c

    @property
    def input_pose(self) -> float:
        return canonical_pose(self.cfg.input_pose)

    @property
    def poses(self) -> np.ndarray:
        return self.cfg.input_pose + TWO_PI * np.arange(self.cfg.n_poses) / self.cfg.n_poses

    def operator(self, pose) -> ViewOperator:
        return view_operator(pose, self.n, self.d)

    def with_config(self, **changes) -> "World":
        return make_world(self.seed, replace(self.cfg, **changes))


def make_sprite(rng: np.random.Generator, n: int, n_rects: int = 3,
                n_discs: int = 2) -> np.ndarray:
    """Union of random axis-aligned rectangles and discs on an n x n grid."""
    img = np.zeros((n, n))
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    for _ in range(n_rects):
        cx, cy = rng.uniform(0.25, 0.75, size=2)
        hw, hh = rng.uniform(0.06, 0.2, size=2)
        mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        img[mask] = np.maximum(img[mask], rng.uniform(0.6, 1.0))
    for _ in range(n_discs):
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        r = rng.uniform(0.06, 0.16)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[mask] = np.maximum(img[mask], rng.uniform(0.6, 1.0))
    return img


def make_world(seed: int, cfg: WorldConfig | None = None) -> World:
    cfg = cfg or WorldConfig()
    rng = np.random.default_rng([int(seed), 0])
    gt = make_sprite(rng, cfg.n, cfg.n_rects, cfg.n_discs)
    # redraw until the object is visible enough
    while np.mean(gt > 0.5) < 0.05:
        gt = make_sprite(rng, cfg.n, cfg.n_rects, cfg.n_discs)
    distractors = tuple(make_sprite(rng, cfg.n, cfg.n_rects, cfg.n_discs)
                        for _ in range(cfg.n_distractors))
    object_weights = rng.dirichlet(np.full(cfg.n_distractors + 1, 2.0))
    gt.setflags(write=False)
    return World(int(seed), cfg, gt, distractors, object_weights)


def render(theta, pose, world: World | None = None, *, n=None, d=None) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    n = n or (world.n if world is not None else theta.shape[0])
    d = d or (world.d if world is not None else None)
    if theta.shape[-2:] != (n, n):
        raise ValueError(f"grid shape {theta.shape} does not match n={n}")
    op = view_operator(pose, n, d)
    return theta.reshape(*theta.shape[:-2], n * n) @ op.matrix.T


def jittered_grid(world: World, pose: float, k: int) -> np.ndarray:
    """Copy of the object shifted by ``jitter`` pixels in a pose-specific direction."""
    if k == 0 or world.cfg.jitter == 0:
        return np.asarray(world.gt)
    key = int(round(canonical_pose(pose) * 1e9))
    rng = np.random.default_rng([world.seed, 1, key, k])
    ang = rng.uniform(0, TWO_PI)
    shift = world.cfg.jitter * np.array([np.sin(ang), np.cos(ang)])
    return ndimage.shift(np.asarray(world.gt), shift, order=1, mode="constant")


def conditional_gmm(world: World, pose: float) -> GaussianMixture:
    """Views a multi-view diffuser would propose at ``pose``: the true one plus
    jittered alternates that disagree from pose to pose."""
    k = world.cfg.k_modes
    means = [render(jittered_grid(world, pose, i), pose, world) for i in range(k)]
    if k == 1:
        weights = np.array([1.0])
    else:
        w1 = world.cfg.mode1_weight
        weights = np.concatenate(([w1], np.full(k - 1, (1.0 - w1) / (k - 1))))
    return GaussianMixture(weights, np.stack(means), world.sigma_c ** 2)


def pose_marginal_gmm(world: World, pose: float) -> GaussianMixture:
    """Views at ``pose`` with the input-image condition dropped: one component
    per object in the world's universe, weighted by object frequency."""
    objs = (world.gt,) + world.distractors
    means = np.stack([render(o, pose, world) for o in objs])
    return GaussianMixture(world.object_weights, means, world.cfg.prior_sigma ** 2)


def world_prior(world: World) -> GaussianMixture:
    """Unconditional view distribution: every object at every training pose."""
    objs = (world.gt,) + world.distractors
    ow = world.object_weights
    poses = world.poses
    means = np.stack([render(o, p, world) for o in objs for p in poses])
    weights = np.repeat(ow, len(poses)) / len(poses)
    weights = weights / weights.sum()
    return GaussianMixture(weights, means, world.cfg.prior_sigma ** 2)


def input_view(world: World) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng([world.seed, 2])
    clean = render(world.gt, world.input_pose, world)
    noise = rng.standard_normal(world.d)
    return clean + (world.sigma_c / 4.0) * noise, world.input_pose
