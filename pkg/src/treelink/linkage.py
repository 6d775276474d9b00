"""Metropolis-within-Gibbs sampler for two-file spatial record linkage.

Records ``y`` in file 1 are noisy copies of latent locations ``s``; file 2
records are noisy copies of a rigidly transformed ``s`` (rotation about the
domain midpoint, then translation). Latent indices are 0-based internally.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from . import _kernels
from .errors import CandidateSearchFailed, EmptyInput, NumericalFailure, ValidationError
from .spatial import Domain, GridIndex, RigidTransform, apply_transform, expand_domain, invert_transform


@dataclass
class RecordFile:
    file_index: int
    year: int
    locations: np.ndarray
    volumes: np.ndarray
    record_ids: np.ndarray

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.volumes = np.asarray(self.volumes, dtype=float).reshape(-1)
        self.record_ids = np.asarray(self.record_ids, dtype=np.int64).reshape(-1)
        n = len(self.locations)
        if len(self.volumes) != n or len(self.record_ids) != n:
            raise ValidationError("locations, volumes and record_ids differ in length")
        if self.file_index not in (1, 2):
            raise ValidationError(f"file_index must be 1 or 2, got {self.file_index}")
        if n and not np.all(np.isfinite(self.locations)):
            raise ValidationError("non-finite record location")
        if n and not np.all(self.volumes > 0):
            raise ValidationError("volumes must be positive")
        if len(np.unique(self.record_ids)) != n:
            raise ValidationError("record_ids must be unique within a file")

    def __len__(self) -> int:
        return len(self.locations)

    def check_inside(self, domain: Domain) -> None:
        bad = np.flatnonzero(~domain.contains(self.locations))
        if len(bad):
            raise ValidationError(
                f"file {self.file_index}: {len(bad)} records outside the analysis domain",
                record_ids=self.record_ids[bad[:10]].tolist(),
            )


@dataclass(frozen=True)
class LinkagePriors:
    c_sigma: float = 2.0
    d_sigma: float = 0.1
    b_sigma: float = 1.0
    kappa: float = 1.0
    nu: float = 0.0
    b_theta: float = 0.1
    sigma_t2: float = 4.0
    q: float = 1.25
    fix_theta: bool = False
    fix_translation: bool = False
    latent_domain_margin_m: float = 5.0

    def __post_init__(self):
        for name in ("c_sigma", "d_sigma", "b_sigma", "kappa", "sigma_t2", "q"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"prior {name} must be positive")
        if not 0 < self.b_theta <= math.pi:
            raise ValidationError("b_theta must lie in (0, pi]")
        if self.latent_domain_margin_m < 0:
            raise ValidationError("latent_domain_margin_m must be nonnegative")


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 2000
    burnin: int = 500
    thin: int = 10
    box_half_width: float | None = 3.0  # None: exhaustive candidate scan
    min_candidates: int = 2
    box_growth_factor: float = 1.5
    seed: int = 0
    random_scan: bool = False
    theta_step: float = 1e-3
    theta_target_accept: float = 0.4

    def __post_init__(self):
        if not 0 <= self.burnin < self.iterations:
            raise ValidationError("need 0 <= burnin < iterations")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if self.box_half_width is not None and not self.box_half_width > 0:
            raise ValidationError("box_half_width must be positive")
        if self.min_candidates < 2:
            raise ValidationError("min_candidates must be >= 2")
        if not self.box_growth_factor > 1:
            raise ValidationError("box_growth_factor must exceed 1")


@dataclass
class LinkageData:
    """Both files stacked in (file, record) order plus the geometry they live in."""

    files: tuple[RecordFile, RecordFile]
    domain: Domain
    latent_domain: Domain
    y: np.ndarray
    file_of: np.ndarray  # 0 for file 1, 1 for file 2
    n_latent: int

    def __post_init__(self):
        if len(self.y):
            lo, hi = self.y.min(axis=0), self.y.max(axis=0)
            self.record_box = Domain(lo[0], lo[1], hi[0] + 1e-9, hi[1] + 1e-9)
        else:
            self.record_box = self.domain

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def mu(self):
        return self.domain.midpoint

    def slice_of(self, i: int) -> slice:
        n1 = len(self.files[0])
        return slice(0, n1) if i == 0 else slice(n1, self.n)

    @property
    def keys(self) -> list[tuple[int, int]]:
        return [(f.file_index, int(r)) for f in self.files for r in f.record_ids]

    @property
    def volumes(self) -> np.ndarray:
        return np.concatenate([f.volumes for f in self.files])


@dataclass
class LinkageState:
    lam: np.ndarray
    s: np.ndarray
    sigma2: float
    theta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    t: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    theta_step: float = 1e-3
    clamp_count: int = 0

    def transform(self, i: int, mu) -> RigidTransform:
        return RigidTransform(float(self.theta[i]), tuple(self.t[i]), tuple(mu))


@dataclass
class LinkagePosterior:
    lam_draws: np.ndarray  # (K, n) int
    s_draws: np.ndarray  # (K, N, 2)
    draw_iterations: np.ndarray
    sigma2_trace: np.ndarray
    theta_trace: np.ndarray
    t_trace: np.ndarray  # (iterations, 2), file 2 translation
    burnin: int
    thin: int
    seed: int
    keys: list
    diagnostics: dict = field(default_factory=dict)
    seconds_per_iteration: float | None = None

    @property
    def n_draws(self) -> int:
        return len(self.lam_draws)


def latent_count(n1: int, n2: int, q: float) -> int:
    """N = q * max(n1, n2), rounded up and capped at n1 + n2."""
    if n1 < 0 or n2 < 0 or not q > 0:
        raise ValidationError("need n1, n2 >= 0 and q > 0")
    if n1 + n2 == 0:
        raise EmptyInput("both files are empty")
    return int(min(math.ceil(q * max(n1, n2) - 1e-9), n1 + n2))


def prepare_data(files, domain: Domain, priors: LinkagePriors) -> LinkageData:
    f1, f2 = sorted(files, key=lambda f: f.file_index)
    if (f1.file_index, f2.file_index) != (1, 2):
        raise ValidationError("expected one file with index 1 and one with index 2")
    n_latent = latent_count(len(f1), len(f2), priors.q)
    y = np.concatenate([f1.locations, f2.locations])
    file_of = np.concatenate([np.zeros(len(f1), np.int64), np.ones(len(f2), np.int64)])
    return LinkageData(
        files=(f1, f2),
        domain=domain,
        latent_domain=expand_domain(domain, priors.latent_domain_margin_m),
        y=y,
        file_of=file_of,
        n_latent=n_latent,
    )


def _sigma2_median(priors: LinkagePriors) -> float:
    # inverse-gamma median via the regularized upper incomplete gamma
    med = priors.d_sigma / special.gammainccinv(priors.c_sigma, 0.5)
    return float(min(med, priors.b_sigma))


def init_state(data: LinkageData, priors: LinkagePriors, config: SamplerConfig,
               rng: np.random.Generator) -> LinkageState:
    N, n = data.n_latent, data.n
    take = min(N, n)
    idx = np.sort(rng.choice(n, size=take, replace=False))
    seeds = np.empty((N, 2))
    seeds[:take] = data.y[idx]
    if N > take:
        seeds[take:] = data.latent_domain.sample_uniform(rng, N - take)
    # nearest seed; ties resolved toward the lower latent index
    d2 = ((data.y[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2) if n * N <= 4_000_000 else None
    if d2 is not None:
        lam = np.argmin(d2, axis=1)
    else:
        from scipy.spatial import cKDTree

        lam = cKDTree(seeds).query(data.y)[1]
    s = data.latent_domain.clamp(seeds)
    return LinkageState(
        lam=lam.astype(np.int64),
        s=s,
        sigma2=_sigma2_median(priors),
        theta=np.zeros(2),
        t=np.zeros((2, 2)),
        theta_step=config.theta_step,
    )


def transformed_latents(state: LinkageState, data: LinkageData, i: int) -> np.ndarray:
    if i == 0:
        return state.s
    return apply_transform(state.transform(1, data.mu), state.s)


def build_grids(state: LinkageState, data: LinkageData, config: SamplerConfig) -> list[GridIndex]:
    cs = config.box_half_width if config.box_half_width is not None else data.domain.diagonal
    return [GridIndex(transformed_latents(state, data, i), cs) for i in (0, 1)]


def _max_half_width(grid: GridIndex, ybox: Domain) -> float:
    """Half-width beyond which a box around any record covers every latent."""
    e = grid.extent
    w = max(e.xmax, ybox.xmax) - min(e.xmin, ybox.xmin)
    h = max(e.ymax, ybox.ymax) - min(e.ymin, ybox.ymin)
    return math.hypot(w, h) + 1.0


def update_lambda(state: LinkageState, data: LinkageData, grids, priors: LinkagePriors,
                  config: SamplerConfig, rng: np.random.Generator) -> LinkageState:
    """Redraw every record's latent index from its (box-restricted) categorical conditional."""
    u = rng.random(data.n)
    if config.random_scan:
        u = u[rng.permutation(data.n)]
    lam = state.lam.copy()
    for i in (0, 1):
        sl = data.slice_of(i)
        y = data.y[sl]
        if len(y) == 0:
            continue
        out = np.empty(len(y), dtype=np.int64)
        if config.box_half_width is None:
            _kernels.lambda_exhaustive(y, grids[i].points, state.sigma2, u[sl], out)
        else:
            g = grids[i]
            bad = _kernels.lambda_box(
                y, g.points, g.origin[0], g.origin[1], g.cell_size, g.ncx, g.ncy,
                g.starts, g.order, state.sigma2, config.box_half_width,
                config.box_growth_factor, config.min_candidates,
                _max_half_width(g, data.record_box), u[sl], out,
            )
            if bad >= 0:
                raise CandidateSearchFailed(
                    f"no {config.min_candidates} candidates for record {bad} of file {i + 1}",
                    file_index=i + 1, record=int(bad),
                )
        lam[sl] = out
    return replace(state, lam=lam)


def lambda_conditional(state: LinkageState, data: LinkageData, record: int,
                       config: SamplerConfig, grids=None) -> np.ndarray:
    """Length-N probability vector the sampler uses for one record."""
    i = int(data.file_of[record])
    cx, cy = data.y[record]
    if config.box_half_width is None:
        lat = transformed_latents(state, data, i)
        logw = -((lat - data.y[record]) ** 2).sum(axis=1) / (2 * state.sigma2)
        w = np.exp(logw - logw.max())
        return w / w.sum()
    g = (grids or build_grids(state, data, config))[i]
    return _kernels.lambda_box_probs(
        cx, cy, g.points, g.origin[0], g.origin[1], g.cell_size, g.ncx, g.ncy, g.starts,
        g.order, state.sigma2, config.box_half_width, config.box_growth_factor,
        config.min_candidates, _max_half_width(g, data.record_box),
    )


def latent_frame_records(state: LinkageState, data: LinkageData) -> np.ndarray:
    """Every record mapped back into latent coordinates through its file's transform."""
    out = data.y.copy()
    sl = data.slice_of(1)
    out[sl] = invert_transform(state.transform(1, data.mu), data.y[sl])
    return out


def update_s(state: LinkageState, data: LinkageData, priors: LinkagePriors,
             rng: np.random.Generator, max_attempts: int = 1000) -> LinkageState:
    """Conjugate normal draw per occupied latent, uniform on D* for empty ones.

    Occupied draws falling outside D* are redrawn (rejection); after
    ``max_attempts`` they are clamped to D* and counted in ``clamp_count``.
    """
    N = data.n_latent
    d = data.latent_domain
    z = latent_frame_records(state, data)
    normals = rng.standard_normal((N, 2))
    uniforms = rng.random((N, 2))
    s = np.empty((N, 2))
    mean = np.empty((N, 2))
    counts = np.empty(N, dtype=np.int64)
    outside = _kernels.latent_draw(state.lam, z, state.sigma2, normals, uniforms,
                                   d.xmin, d.ymin, d.xmax, d.ymax, s, mean, counts)
    clamp = state.clamp_count
    if outside:
        todo = np.flatnonzero((counts > 0) & ~d.contains(s))
        sd = np.sqrt(state.sigma2 / counts[todo])
        attempts = 1
        while len(todo) and attempts < max_attempts:
            s[todo] = mean[todo] + sd[:, None] * rng.standard_normal((len(todo), 2))
            keep = ~d.contains(s[todo])
            todo, sd = todo[keep], sd[keep]
            attempts += 1
        if len(todo):
            s[todo] = d.clamp(mean[todo])
            clamp += len(todo)
    return replace(state, s=s, clamp_count=clamp)


def residual_sumsq(state: LinkageState, data: LinkageData) -> float:
    total = 0.0
    for i in (0, 1):
        sl = data.slice_of(i)
        lat = transformed_latents(state, data, i)
        total += float(((data.y[sl] - lat[state.lam[sl]]) ** 2).sum())
    return total


def sample_truncated_invgamma(shape: float, scale: float, upper: float,
                              rng: np.random.Generator) -> float:
    """Inverse-CDF draw from Inverse-Gamma(shape, scale) restricted to (0, upper]."""
    f_upper = special.gammaincc(shape, scale / upper)
    if not f_upper > 0:
        return float(upper)
    u = rng.uniform(0.0, f_upper)
    x = special.gammainccinv(shape, u)
    if not x > 0:
        return float(upper)
    return float(min(scale / x, upper))


def sigma2_conditional_params(state: LinkageState, data: LinkageData, priors: LinkagePriors):
    # two coordinates per record: shape gains 2n/2 = n
    return priors.c_sigma + data.n, priors.d_sigma + 0.5 * residual_sumsq(state, data)


def update_sigma2(state: LinkageState, data: LinkageData, priors: LinkagePriors,
                  rng: np.random.Generator) -> LinkageState:
    shape, scale = sigma2_conditional_params(state, data, priors)
    return replace(state, sigma2=sample_truncated_invgamma(shape, scale, priors.b_sigma, rng))


def translation_conditional(state: LinkageState, data: LinkageData, priors: LinkagePriors):
    """Mean and per-axis variance of the file-2 translation full conditional."""
    sl = data.slice_of(1)
    n2 = sl.stop - sl.start
    precision = n2 / state.sigma2 + 1.0 / priors.sigma_t2
    if n2 == 0:
        return np.zeros(2), 1.0 / precision
    rotated = apply_transform(RigidTransform(float(state.theta[1]), (0.0, 0.0), tuple(data.mu)),
                              state.s[state.lam[sl]])
    resid_sum = (data.y[sl] - rotated).sum(axis=0)
    return resid_sum / state.sigma2 / precision, 1.0 / precision


def update_translation(state: LinkageState, data: LinkageData, priors: LinkagePriors,
                       rng: np.random.Generator) -> LinkageState:
    if priors.fix_translation:
        return state
    mean, var = translation_conditional(state, data, priors)
    t = state.t.copy()
    t[1] = mean + math.sqrt(var) * rng.standard_normal(2)
    return replace(state, t=t)


def _file2_loglik(theta: float, state: LinkageState, data: LinkageData) -> float:
    sl = data.slice_of(1)
    tr = RigidTransform(theta, tuple(state.t[1]), tuple(data.mu))
    pred = apply_transform(tr, state.s[state.lam[sl]])
    return -float(((data.y[sl] - pred) ** 2).sum()) / (2.0 * state.sigma2)


def theta_log_prior(theta: float, priors: LinkagePriors) -> float:
    if abs(theta) >= priors.b_theta:
        return -math.inf
    return priors.kappa * math.cos(theta - priors.nu)


def update_theta(state: LinkageState, data: LinkageData, priors: LinkagePriors,
                 config: SamplerConfig, rng: np.random.Generator):
    """One random-walk Metropolis step on the file-2 rotation.

    Returns ``(state, accepted)``; ``accepted`` is None when the update is skipped.
    """
    if priors.fix_theta:
        return state, None
    cur = float(state.theta[1])
    prop = cur + state.theta_step * rng.standard_normal()
    u = rng.random()
    if abs(prop) >= priors.b_theta:
        return state, False
    log_ratio = (
        _file2_loglik(prop, state, data) + theta_log_prior(prop, priors)
        - _file2_loglik(cur, state, data) - theta_log_prior(cur, priors)
    )
    if math.log(u) < log_ratio:
        theta = state.theta.copy()
        theta[1] = prop
        return replace(state, theta=theta), True
    return state, False


def _check_finite(state: LinkageState, it: int) -> None:
    if not (math.isfinite(state.sigma2) and np.all(np.isfinite(state.s))
            and np.all(np.isfinite(state.t)) and np.all(np.isfinite(state.theta))):
        raise NumericalFailure(f"non-finite sampler state at iteration {it}", iteration=it)


def run_gibbs(files, priors: LinkagePriors, config: SamplerConfig, domain: Domain,
              progress=None) -> LinkagePosterior:
    """Full sampler: lambda -> s -> sigma2 -> t2 -> theta2 per sweep."""
    if sum(len(f) for f in files) == 0:
        raise EmptyInput("no records to link")
    data = prepare_data(files, domain, priors)
    rng = np.random.default_rng(config.seed)
    state = init_state(data, priors, config, rng)

    n_keep = (config.iterations - config.burnin) // config.thin
    lam_draws = np.empty((n_keep, data.n), dtype=np.int32)
    s_draws = np.empty((n_keep, data.n_latent, 2))
    draw_iters = np.empty(n_keep, dtype=np.int64)
    sigma2_tr = np.empty(config.iterations)
    theta_tr = np.empty(config.iterations)
    t_tr = np.empty((config.iterations, 2))

    accepted = tried = 0
    window_acc = window_n = 0
    k = 0
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        grids = build_grids(state, data, config)
        state = update_lambda(state, data, grids, priors, config, rng)
        state = update_s(state, data, priors, rng)
        state = update_sigma2(state, data, priors, rng)
        state = update_translation(state, data, priors, rng)
        state, acc = update_theta(state, data, priors, config, rng)
        if acc is not None:
            tried += 1
            accepted += acc
            window_n += 1
            window_acc += acc
            if it <= config.burnin and window_n == 20:
                # Robbins-Monro on log step size, frozen after burn-in
                rate = window_acc / window_n
                state.theta_step *= math.exp((rate - config.theta_target_accept) / math.sqrt(it / 20))
                state.theta_step = min(state.theta_step, priors.b_theta)
                window_acc = window_n = 0
        _check_finite(state, it)
        sigma2_tr[it - 1] = state.sigma2
        theta_tr[it - 1] = state.theta[1]
        t_tr[it - 1] = state.t[1]
        if it > config.burnin and (it - config.burnin) % config.thin == 0:
            lam_draws[k] = state.lam
            s_draws[k] = state.s
            draw_iters[k] = it
            k += 1
        if progress is not None:
            progress(it, state)
    elapsed = time.perf_counter() - t0

    return LinkagePosterior(
        lam_draws=lam_draws,
        s_draws=s_draws,
        draw_iterations=draw_iters,
        sigma2_trace=sigma2_tr,
        theta_trace=theta_tr,
        t_trace=t_tr,
        burnin=config.burnin,
        thin=config.thin,
        seed=config.seed,
        keys=data.keys,
        diagnostics={
            "n_latent": data.n_latent,
            "n_records": data.n,
            "theta_acceptance": accepted / tried if tried else None,
            "theta_step": state.theta_step,
            "clamp_count": state.clamp_count,
        },
        seconds_per_iteration=elapsed / config.iterations,
    )


def posterior_similarity(post: LinkagePosterior, n: int | None = None) -> np.ndarray:
    """Fraction of retained draws in which each record pair shares a latent."""
    lam = post.lam_draws if isinstance(post, LinkagePosterior) else np.asarray(post)
    if len(lam) == 0:
        raise ValidationError("posterior has no retained draws")
    n = lam.shape[1] if n is None else n
    out = np.zeros((n, n))
    for row in lam:
        out += row[:n, None] == row[None, :n]
    return out / len(lam)
