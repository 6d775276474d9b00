"""Two-stage linkage averaging and the nearest-distance matching baseline.

Linkage averaging fits the growth model conditionally on ``k`` linkage draws
(``l`` growth draws each) and pools the ``k*l`` draws with equal weight.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoUsableDraws, ValidationError
from .growth import (ClusterArrays, GrowthCluster, GrowthMCMCConfig, GrowthPosterior, GrowthPriors,
                     competition_metrics, derive_growth_clusters, fit_growth, param_names)
from .linkage import LinkageData, LinkagePosterior, RecordFile
from .raster import sample_raster_many
from .spatial import Domain, Point2

log = logging.getLogger(__name__)


@dataclass
class LAConfig:
    k: int = 100
    l: int = 1000
    r1: float = 0.9
    r2: float = 1.6
    boundary_buffer: float = 15.0
    seed: int = 0
    burnin: int = 2000
    thin: int = 1
    workers: int = 1
    competition_radius: float | None = None
    min_clusters: int | None = None

    def __post_init__(self):
        if self.k < 1 or self.l < 1:
            raise ValidationError("k and l must be at least 1")
        if not 0 < self.r1 < self.r2:
            raise ValidationError("growth-rate bounds must satisfy 0 < r1 < r2")
        if self.boundary_buffer < 0:
            raise ValidationError("boundary_buffer must be nonnegative")

    def growth_config(self, seed: int) -> GrowthMCMCConfig:
        return GrowthMCMCConfig(burnin=self.burnin, draws=self.l, thin=self.thin, seed=seed)


@dataclass
class Competition:
    """Standardized competition metrics of file-1 records, used as extra covariates."""

    rsi: np.ndarray
    lnv: np.ndarray
    nd: np.ndarray

    @classmethod
    def from_file(cls, f: RecordFile, radius: float) -> "Competition":
        rsi, lnv, nd = competition_metrics(f.locations, f.volumes, radius)

        def z(a):
            ok = np.isfinite(a)
            sd = a[ok].std(ddof=1) if ok.sum() > 1 else 0.0
            return (a - a[ok].mean()) / sd if sd > 0 else np.where(ok, 0.0, np.nan)

        return cls(z(rsi), z(lnv), z(nd))

    def rows(self, idx) -> np.ndarray:
        return np.column_stack([self.rsi[idx], self.lnv[idx], self.nd[idx]])


def covariate_design(clusters, rasters, domain: Domain, buffer: float, volumes1=None,
                     competition: Competition | None = None):
    """Attach covariate rows and drop clusters near the boundary or lacking covariates.

    ``volumes1`` (file-1 volumes in data order) picks the largest file-1 member
    when competition metrics are used. Returns ``(kept_clusters, ClusterArrays)``.
    """
    if not clusters:
        return [], None
    loc = np.array([c.latent_location for c in clusters], dtype=float)
    keep = domain.distance_to_boundary(loc) >= buffer
    cols = [np.ones(len(clusters))] + [sample_raster_many(r, loc) for r in rasters]
    X = np.column_stack(cols)
    if competition is not None:
        rep = np.array([max((m for m in c.members if m < len(volumes1)), key=lambda m: volumes1[m])
                        for c in clusters])
        X = np.column_stack([X, competition.rows(rep)])
    keep &= np.all(np.isfinite(X), axis=1)
    kept = []
    for c, row, ok in zip(clusters, X, keep):
        if ok:
            c.covariates = row
            kept.append(c)
    if not kept:
        return [], None
    return kept, ClusterArrays.from_clusters(kept)


def file1_max_volume(data: LinkageData) -> float:
    return float(np.max(data.files[0].volumes))


def _resolve_priors(priors: GrowthPriors, data: LinkageData) -> GrowthPriors:
    if priors.b_gamma is None:
        return replace(priors, b_gamma=max(file1_max_volume(data), priors.a_gamma + 1e-6))
    return priors


def growth_inputs(lam, s, data: LinkageData, rasters, cfg: LAConfig, competition=None):
    years = (data.files[0].year, data.files[1].year)
    clusters = derive_growth_clusters(lam, data.file_of + 1, data.volumes, s, cfg.r1, cfg.r2, years)
    return covariate_design(clusters, rasters, data.domain, cfg.boundary_buffer,
                            data.files[0].volumes, competition)


def _fit_task(args):
    t, arr, priors, gcfg, seed_seq, min_clusters = args
    if arr is None or len(arr) < min_clusters:
        return t, None, 0 if arr is None else len(arr)
    rng = np.random.default_rng(seed_seq)
    post = fit_growth(arr, priors, gcfg, rng=rng)
    return t, post, len(arr)


@dataclass
class PooledPosterior:
    names: list[str]
    draws: np.ndarray
    tags: np.ndarray  # (rows, 2): linkage draw position t, growth draw u
    linkage_draws: np.ndarray  # retained-draw indices used, in order t = 0..k-1
    skipped: list[int]
    n_clusters: list[int]
    acceptance: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def summaries(self, level: float = 0.9) -> dict[str, dict[str, float]]:
        return summarize(self.names, self.draws, level)


def summarize(names, draws, level: float = 0.9) -> dict[str, dict[str, float]]:
    out = {}
    for j, name in enumerate(names):
        col = draws[:, j]
        lo, hi = credible_interval(col, level)
        out[name] = {"mean": float(col.mean()), "sd": float(col.std(ddof=1)) if len(col) > 1 else 0.0,
                     "lo": lo, "hi": hi}
    return out


def run_la(post: LinkagePosterior, data: LinkageData, rasters, priors: GrowthPriors, cfg: LAConfig,
           competition: Competition | None = None) -> PooledPosterior:
    if post.n_draws < cfg.k:
        raise ValidationError(f"linkage posterior has {post.n_draws} draws, need k={cfg.k}")
    priors = _resolve_priors(priors, data)
    p1 = 1 + len(rasters) + (3 if competition is not None else 0)
    min_clusters = cfg.min_clusters or p1 + 1
    ss = np.random.SeedSequence(cfg.seed)
    pick_seq, *fit_seqs = ss.spawn(cfg.k + 1)
    chosen = np.random.default_rng(pick_seq).choice(post.n_draws, size=cfg.k, replace=False)
    tasks = []
    for t, d in enumerate(chosen):
        _, arr = growth_inputs(post.lam_draws[d], post.s_draws[d], data, rasters, cfg, competition)
        tasks.append((t, arr, priors, cfg.growth_config(cfg.seed), fit_seqs[t], min_clusters))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_fit_task, tasks))
    else:
        results = [_fit_task(a) for a in tasks]
    results.sort(key=lambda r: r[0])
    blocks, tags, skipped, counts, acc = [], [], [], [], []
    for t, gp, m in results:
        counts.append(m)
        if gp is None:
            skipped.append(t)
            continue
        blocks.append(gp.draws)
        tags.append(np.column_stack([np.full(len(gp.draws), t), np.arange(len(gp.draws))]))
        acc.append(gp.acceptance)
    if skipped:
        log.warning("skipped %d of %d linkage draws with too few growth clusters", len(skipped), cfg.k)
    if not blocks:
        raise NoUsableDraws("no linkage draw produced enough growth clusters")
    return PooledPosterior(param_names(p1, priors.skew), np.vstack(blocks), np.vstack(tags).astype(np.int64),
                           chosen.astype(np.int64), skipped, counts, acc)


# ---------------------------------------------------------------- nearest distance matching


@dataclass
class NDMResult:
    pairs: np.ndarray  # (n1, 2): file-1 row, matched file-2 row
    distances: np.ndarray
    clusters: list = field(default_factory=list)
    posterior: GrowthPosterior | None = None


def ndm_link(file1: RecordFile, file2: RecordFile) -> NDMResult:
    """Pair every file-1 record with its nearest file-2 record (ties: lowest record id)."""
    if len(file2) == 0:
        raise ValidationError("file 2 is empty")
    n1 = len(file1)
    if n1 == 0:
        return NDMResult(np.empty((0, 2), np.int64), np.empty(0))
    tree = cKDTree(file2.locations)
    kk = min(8, len(file2))
    dist, idx = tree.query(file1.locations, k=kk)
    dist = dist.reshape(n1, kk)
    idx = idx.reshape(n1, kk)
    best = np.empty(n1, dtype=np.int64)
    for i in range(n1):
        d0 = dist[i, 0]
        if kk > 1 and dist[i, -1] == d0:
            # more ties than we fetched: fall back to a full scan for this record
            dd = np.hypot(*(file2.locations - file1.locations[i]).T)
            cand = np.flatnonzero(dd == dd.min())
        else:
            cand = idx[i, dist[i] == d0]
        best[i] = cand[np.argmin(file2.record_ids[cand])]
    d = np.hypot(*(file2.locations[best] - file1.locations).T)
    return NDMResult(np.column_stack([np.arange(n1), best]), d)


def ndm_growth_clusters(res: NDMResult, file1: RecordFile, file2: RecordFile, r1: float, r2: float):
    """Growth clusters from matched pairs, located at the file-1 record."""
    span = float(file2.year - file1.year)
    out = []
    for a, b in res.pairs:
        v1, v2 = float(file1.volumes[a]), float(file2.volumes[b])
        if r1 * v1 < v2 < r2 * v1:
            out.append(GrowthCluster(int(a), v1, v2, span, (v2 - v1) / span,
                                     Point2(*map(float, file1.locations[a])),
                                     members=(int(a), len(file1) + int(b))))
    return out


def fit_ndm(data: LinkageData, rasters, priors: GrowthPriors, cfg: LAConfig, draws: int | None = None,
            competition: Competition | None = None) -> NDMResult:
    f1, f2 = data.files
    res = ndm_link(f1, f2)
    clusters = ndm_growth_clusters(res, f1, f2, cfg.r1, cfg.r2)
    kept, arr = covariate_design(clusters, rasters, data.domain, cfg.boundary_buffer, f1.volumes, competition)
    res.clusters = kept
    res.posterior = fit_fixed(arr, data, priors, cfg, draws)
    return res


def fit_fixed(arr: ClusterArrays | None, data: LinkageData, priors: GrowthPriors, cfg: LAConfig,
              draws: int | None = None) -> GrowthPosterior:
    """Growth fit conditional on one fixed set of clusters."""
    if arr is None or len(arr) < arr.p1 + 1:
        raise NoUsableDraws("too few growth clusters for a fit")
    priors = _resolve_priors(priors, data)
    gcfg = replace(cfg.growth_config(cfg.seed), draws=draws or cfg.l)
    seq = np.random.SeedSequence(cfg.seed).spawn(1)[0]
    return fit_growth(arr, priors, gcfg, rng=np.random.default_rng(seq))


def credible_interval(draws, level: float) -> tuple[float, float]:
    """Equal-tailed interval with linear interpolation between order statistics."""
    x = np.asarray(draws, dtype=float).ravel()
    if len(x) < 2:
        raise ValidationError("need at least two draws")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    a = (1 - level) / 2
    lo, hi = np.quantile(x, [a, 1 - a])
    return float(lo), float(hi)


def interval_table(names, draws, level: float = 0.9) -> dict[str, tuple[float, float]]:
    return {n: credible_interval(draws[:, j], level) for j, n in enumerate(names)}
