"""Synthetic two-survey stands with known linkage.

Latent trees follow a soft-core inhibition pattern on a square, carry
log-normal sizes shifted by two smooth covariates, spawn small recruits near
large parents, and are observed twice: once with location noise, once after
growth, a rigid perturbation and fresh location noise. Both surveys are then
cut to a centered analysis window.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import PackingInfeasible, ValidationError
from .growth import GrowthParams, saturation
from .linkage import RecordFile
from .raster import Raster, sample_raster_many, standardize_covariates
from .spatial import Domain, RigidTransform, apply_transform


@dataclass
class SimConfig:
    density: float = 0.06
    domain_side: float = 130.0
    window_side: float = 100.0
    hardcore_radius: float = 1.5
    softcore_violation_prob: float = 0.05
    sigma_obs: float = 0.25
    theta_true: float = 0.002
    t_true: tuple = (0.5, -0.3)
    alpha: float = 1.0
    gamma: float = 12.0
    beta: tuple = (3.0, 0.5, -0.5, 0.5, -0.5)
    tau: float = 0.5
    mark_median: float = 40.0
    mark_sdlog: float = 0.7
    mark_effects: tuple = (0.2, -0.2)
    recruit_rate: float = 0.001
    recruit_scale: float = 1.0
    recruit_beta_b: float = 8.0
    years: tuple = (2015, 2019)
    volume_floor: float = 0.01
    raster_cellsize: float = 1.0
    field_smoothing: float = 8.0
    max_rejections: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        self.t_true = tuple(float(v) for v in self.t_true)
        self.beta = tuple(float(v) for v in self.beta)
        self.mark_effects = tuple(float(v) for v in self.mark_effects)
        self.years = tuple(int(v) for v in self.years)
        if not self.density > 0:
            raise ValidationError("density must be positive")
        if not 0 <= self.softcore_violation_prob < 1:
            raise ValidationError("softcore_violation_prob must lie in [0, 1)")
        if not self.sigma_obs >= 0:
            raise ValidationError("sigma_obs must be nonnegative")
        if not 0 < self.window_side <= self.domain_side:
            raise ValidationError("window must fit inside the simulation square")
        if self.tau < 0:
            raise ValidationError("tau must be nonnegative")
        if self.years[1] <= self.years[0]:
            raise ValidationError("second survey year must follow the first")

    @property
    def n_covariates(self) -> int:
        return len(self.beta) - 1

    @property
    def square(self) -> Domain:
        return Domain(0.0, 0.0, self.domain_side, self.domain_side)

    @property
    def window(self) -> Domain:
        off = (self.domain_side - self.window_side) / 2
        return Domain(off, off, off + self.window_side, off + self.window_side)

    @property
    def growth_params(self) -> GrowthParams:
        return GrowthParams(self.alpha, self.gamma, np.array(self.beta), self.tau)

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform(self.theta_true, self.t_true, tuple(self.window.midpoint))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimTruth:
    latents: np.ndarray  # (L, 2), parents first then recruits
    marks: np.ndarray
    is_recruit: np.ndarray
    latent_of: tuple  # per file, latent index of each emitted record
    params: GrowthParams
    covariates: np.ndarray  # (L, p) standardized covariate values at each latent

    def partition(self) -> np.ndarray:
        """Latent labels for records stacked as (file 1, file 2)."""
        return np.concatenate(self.latent_of)


@dataclass
class SimDataset:
    files: tuple
    domain: Domain
    rasters: list
    truth: SimTruth
    config: SimConfig
    extra: dict = field(default_factory=dict)


def covariate_fields(config: SimConfig, rng: np.random.Generator) -> list[Raster]:
    """Smooth Gaussian random fields over the square, standardized over the window."""
    cs = config.raster_cellsize
    n = int(math.ceil(config.domain_side / cs))
    out = []
    for k in range(config.n_covariates):
        white = rng.standard_normal((n, n))
        smooth = ndimage.gaussian_filter(white, config.field_smoothing / cs, mode="wrap")
        out.append(Raster(n, n, 0.0, 0.0, cs, smooth, name=f"x{k + 1}"))
    std, _ = standardize_covariates(out, config.window)
    return std


def covariate_matrix(rasters, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if not rasters:
        return np.empty((len(pts), 0))
    return np.column_stack([sample_raster_many(r, pts) for r in rasters])


def generate_latents(config: SimConfig, rng: np.random.Generator, rasters=None):
    """Soft-core sequential inhibition; returns (points, marks)."""
    side = config.domain_side
    target = int(math.ceil(config.density * side * side - 1e-9))
    r = config.hardcore_radius
    r2 = r * r
    pts = np.empty((target, 2))
    cells: dict[tuple[int, int], list[int]] = {}
    cs = max(r, 1e-9)
    count = 0
    misses = 0
    while count < target:
        p = rng.uniform(0.0, side, 2)
        cx, cy = int(p[0] // cs), int(p[1] // cs)
        close = False
        if r > 0:
            for ix in (cx - 1, cx, cx + 1):
                for iy in (cy - 1, cy, cy + 1):
                    for j in cells.get((ix, iy), ()):
                        d = pts[j] - p
                        if d[0] * d[0] + d[1] * d[1] < r2:
                            close = True
                            break
                    if close:
                        break
                if close:
                    break
        if close and not rng.random() < config.softcore_violation_prob:
            misses += 1
            if misses >= config.max_rejections:
                raise PackingInfeasible(f"{misses} consecutive rejections after {count} points")
            continue
        misses = 0
        pts[count] = p
        cells.setdefault((cx, cy), []).append(count)
        count += 1
    marks = draw_marks(config, pts, rasters, rng)
    return pts, marks


def draw_marks(config: SimConfig, pts, rasters, rng: np.random.Generator) -> np.ndarray:
    loc = np.full(len(pts), math.log(config.mark_median))
    if rasters:
        X = covariate_matrix(rasters[: len(config.mark_effects)], pts)
        loc = loc + X @ np.asarray(config.mark_effects[: X.shape[1]])
    return np.exp(loc + config.mark_sdlog * rng.standard_normal(len(pts)))


def generate_recruits(latents, marks, config: SimConfig, rng: np.random.Generator):
    """Returns (points, marks, parent indices) of recruits."""
    marks = np.asarray(marks, dtype=float)
    total = int(round(config.recruit_rate * float(marks.sum())))
    if total <= 0 or len(marks) == 0:
        return np.empty((0, 2)), np.empty(0), np.empty(0, dtype=np.int64)
    parents = rng.choice(len(marks), size=total, p=marks / marks.sum())
    pts = np.empty((total, 2))
    side = config.domain_side
    for k, j in enumerate(parents):
        while True:
            q = latents[j] + config.recruit_scale * rng.standard_cauchy(2)
            if 0 <= q[0] <= side and 0 <= q[1] <= side:
                break
        pts[k] = q
    rmarks = marks.min() * rng.beta(1.0, config.recruit_beta_b, total)
    return pts, rmarks, parents


def grow(config: SimConfig, marks, X, noise: bool, rng: np.random.Generator) -> np.ndarray:
    span = config.years[1] - config.years[0]
    Xd = np.column_stack([np.ones(len(marks)), X])
    mu = (Xd @ np.asarray(config.beta)) * saturation(marks, config.gamma, config.alpha)
    g = mu + (math.sqrt(config.tau) * rng.standard_normal(len(marks)) if noise else 0.0)
    return np.maximum(marks + span * g, config.volume_floor)


def generate_observation(latents, marks, recruits, recruit_marks, rasters, config: SimConfig,
                         rng: np.random.Generator):
    """Two surveys cut to the window plus the record-to-latent truth."""
    L, R = len(latents), len(recruits)
    all_pts = np.vstack([latents, recruits]) if R else latents
    X = covariate_matrix(rasters, all_pts)
    sd = config.sigma_obs

    y1 = latents + sd * rng.standard_normal((L, 2))
    v1 = np.asarray(marks, dtype=float)

    noise2 = sd * rng.standard_normal((L + R, 2))
    y2 = apply_transform(config.transform, all_pts) + noise2
    v2 = np.concatenate([grow(config, marks, X[:L], True, rng),
                         grow(config, recruit_marks, X[L:], False, rng)])

    win = config.window
    files, latent_of = [], []
    for idx, (y, v, year) in enumerate(((y1, v1, config.years[0]), (y2, v2, config.years[1])), start=1):
        keep = np.flatnonzero(win.contains(y))
        order = rng.permutation(keep)
        files.append(RecordFile(idx, year, y[order], v[order], np.arange(1, len(order) + 1)))
        latent_of.append(order.astype(np.int64))
    truth = SimTruth(
        latents=all_pts,
        marks=np.concatenate([marks, recruit_marks]),
        is_recruit=np.concatenate([np.zeros(L, bool), np.ones(R, bool)]),
        latent_of=tuple(latent_of),
        params=config.growth_params,
        covariates=X,
    )
    return files[0], files[1], truth


def generate_dataset(config: SimConfig) -> SimDataset:
    rng = np.random.default_rng(config.seed)
    rasters = covariate_fields(config, rng)
    latents, marks = generate_latents(config, rng, rasters)
    recruits, rmarks, parents = generate_recruits(latents, marks, config, rng)
    f1, f2, truth = generate_observation(latents, marks, recruits, rmarks, rasters, config, rng)
    return SimDataset((f1, f2), config.window, rasters, truth, config,
                      extra={"recruit_parents": parents})
