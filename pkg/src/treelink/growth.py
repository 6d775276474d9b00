"""Growth clusters from a linkage draw and the saturating growth model fitted to them.

The mean annual growth of a cluster with first-survey volume ``v`` and covariate
row ``x`` is ``(x . beta) v^alpha / (gamma^alpha + v^alpha)``. Errors are either
Gaussian with variance ``tau`` or Hansen skew-t with mean zero and variance ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special, stats
from scipy.spatial import cKDTree

from .errors import InvalidTailParameter, PoorMixing, ValidationError
from .skewt import hansen_constants
from .spatial import Point2

LOG_2PI = math.log(2 * math.pi)


@dataclass
class GrowthCluster:
    cluster_id: int
    v_first: float
    v_last: float
    years_span: float
    g: float
    latent_location: Point2
    covariates: np.ndarray | None = None
    members: tuple = ()
    n_first: int = 1
    n_last: int = 1


@dataclass
class GrowthParams:
    alpha: float
    gamma: float
    beta: np.ndarray
    tau: float
    delta: float = 0.0
    omega: float = math.inf

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)


@dataclass
class GrowthPriors:
    """Priors. ``b_gamma=None`` means the largest first-survey volume in the data."""

    a_gamma: float = 1.0
    b_gamma: float | None = None
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    c_alpha: float = 0.1
    d_alpha: float = 5.0
    mu_beta: tuple | None = None
    sigma2_beta: tuple | None = None
    b_tau: float = 10.0
    sigma2_delta: float = 1.0
    b_omega: float = 0.1
    error_family: str = "skew-t"

    def __post_init__(self):
        if self.error_family not in ("skew-t", "gaussian"):
            raise ValidationError(f"unknown error family {self.error_family!r}")
        if not (0 < self.c_alpha < self.d_alpha):
            raise ValidationError("alpha bounds must satisfy 0 < c_alpha < d_alpha")
        if self.b_gamma is not None and not self.a_gamma < self.b_gamma:
            raise ValidationError("gamma bounds must satisfy a_gamma < b_gamma")
        if min(self.a_alpha, self.b_alpha, self.b_tau, self.sigma2_delta, self.b_omega) <= 0:
            raise ValidationError("prior scales must be positive")

    @property
    def skew(self) -> bool:
        return self.error_family == "skew-t"

    def resolved(self, v_first) -> "GrowthPriors":
        if self.b_gamma is not None:
            return self
        top = float(np.max(v_first))
        return _replace(self, b_gamma=max(top, self.a_gamma * (1 + 1e-9) + 1e-9))

    def beta_prior(self, p1: int):
        mu = np.zeros(p1) if self.mu_beta is None else np.asarray(self.mu_beta, dtype=float)
        s2 = np.full(p1, 100.0) if self.sigma2_beta is None else np.asarray(self.sigma2_beta, dtype=float)
        if mu.shape != (p1,) or s2.shape != (p1,):
            raise ValidationError(f"beta prior must have length {p1}")
        return mu, s2


def _replace(obj, **kw):
    return replace(obj, **kw)


# ---------------------------------------------------------------- clusters


def derive_clusters(lam) -> dict[int, np.ndarray]:
    """Map each occupied latent index to the (ascending) record indices linked to it."""
    lam = np.asarray(lam, dtype=np.int64)
    order = np.argsort(lam, kind="stable")
    labels, starts = np.unique(lam[order], return_index=True)
    bounds = list(starts[1:]) + [len(lam)]
    return {int(j): order[a:b] for j, a, b in zip(labels, starts, bounds)}


def derive_growth_clusters(lam, file_of, volumes, s, r1: float, r2: float, years) -> list[GrowthCluster]:
    """Clusters with records in both files whose merged-volume ratio lies in (r1, r2).

    ``file_of`` holds 1 or 2 per record, ``s`` the latent locations indexed by
    ``lam`` and ``years`` the survey years of files 1 and 2.
    """
    if not 0 < r1 < r2:
        raise ValidationError("growth-rate bounds must satisfy 0 < r1 < r2")
    lam = np.asarray(lam, dtype=np.int64)
    file_of = np.asarray(file_of)
    volumes = np.asarray(volumes, dtype=float)
    s = np.asarray(s, dtype=float)
    span = float(years[1] - years[0])
    if span <= 0:
        raise ValidationError("second survey must come after the first")
    N = len(s)
    f1 = file_of == 1
    f2 = ~f1
    v1 = np.bincount(lam[f1], volumes[f1], N)
    v2 = np.bincount(lam[f2], volumes[f2], N)
    c1 = np.bincount(lam[f1], minlength=N)
    c2 = np.bincount(lam[f2], minlength=N)
    keep = (c1 > 0) & (c2 > 0) & (v2 > r1 * v1) & (v2 < r2 * v1)
    members = derive_clusters(lam)
    out = []
    for j in np.flatnonzero(keep):
        out.append(GrowthCluster(
            cluster_id=int(j), v_first=float(v1[j]), v_last=float(v2[j]), years_span=span,
            g=float((v2[j] - v1[j]) / span), latent_location=Point2(float(s[j, 0]), float(s[j, 1])),
            members=tuple(int(r) for r in members[int(j)]), n_first=int(c1[j]), n_last=int(c2[j]),
        ))
    return out


def competition_metrics(locations, volumes, radius: float):
    """Per-record (RSI, LNV, ND) against neighbors strictly inside ``radius``.

    RSI is NaN for records without neighbors.
    """
    if not radius > 0:
        raise ValidationError("radius must be positive")
    pts = np.asarray(locations, dtype=float).reshape(-1, 2)
    vol = np.asarray(volumes, dtype=float)
    n = len(pts)
    rsi = np.full(n, np.nan)
    lnv = np.zeros(n)
    nd = np.zeros(n)
    if n == 0:
        return rsi, lnv, nd
    tree = cKDTree(pts)
    area = math.pi * radius * radius
    for i, nbrs in enumerate(tree.query_ball_point(pts, radius)):
        nb = np.array([j for j in nbrs if j != i], dtype=np.int64)
        if len(nb):
            d = np.hypot(pts[nb, 0] - pts[i, 0], pts[nb, 1] - pts[i, 1])
            inside = d < radius
            nb, d = nb[inside], d[inside]
        if len(nb) == 0:
            continue
        rsi[i] = d.min() / d.mean() if d.mean() > 0 else 1.0
        bigger = vol[nb] > vol[i]
        lnv[i] = vol[nb][bigger].sum()
        nd[i] = len(nb) / area
    return rsi, lnv, nd


# ---------------------------------------------------------------- mean and likelihood


def saturation(v, gamma: float, alpha: float):
    """v^alpha / (gamma^alpha + v^alpha), computed stably in log space."""
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore"):
        z = alpha * (math.log(gamma) - np.log(v))
    return special.expit(-z)


def mm_mean(params: GrowthParams, x_row, v_first):
    x_row = np.asarray(x_row, dtype=float)
    return (x_row @ params.beta) * saturation(v_first, params.gamma, params.alpha)


@dataclass
class ClusterArrays:
    g: np.ndarray
    v: np.ndarray
    X: np.ndarray

    @classmethod
    def from_clusters(cls, clusters) -> "ClusterArrays":
        if isinstance(clusters, ClusterArrays):
            return clusters
        if not clusters:
            raise ValidationError("no growth clusters")
        if any(c.covariates is None for c in clusters):
            raise ValidationError("growth clusters lack covariate rows")
        return cls(np.array([c.g for c in clusters], dtype=float),
                   np.array([c.v_first for c in clusters], dtype=float),
                   np.vstack([np.asarray(c.covariates, dtype=float) for c in clusters]))

    def __len__(self):
        return len(self.g)

    @property
    def p1(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "ClusterArrays":
        return ClusterArrays(self.g[idx], self.v[idx], self.X[idx])


def in_support(params: GrowthParams, priors: GrowthPriors) -> bool:
    ok = (priors.c_alpha <= params.alpha <= priors.d_alpha
          and params.gamma >= priors.a_gamma
          and (priors.b_gamma is None or params.gamma <= priors.b_gamma)
          and 0 < params.tau < priors.b_tau
          and np.all(np.isfinite(params.beta)))
    if priors.skew:
        ok = ok and abs(params.delta) < 1 and params.omega > 2
    return bool(ok)


def _loglik_terms(resid, tau, delta, omega, skew):
    if not skew:
        return -0.5 * (LOG_2PI + math.log(tau) + resid * resid / tau)
    a, b, c = hansen_constants(delta, omega)
    z = resid / math.sqrt(tau)
    side = np.where(z < -a / b, 1 - delta, 1 + delta)
    x = (b * z + a) / side
    return math.log(b * c) - 0.5 * math.log(tau) - (omega + 1) / 2 * np.log1p(x * x / (omega - 2))


def growth_loglik(params: GrowthParams, clusters, priors: GrowthPriors | None = None) -> float:
    """Sum of per-cluster log densities; -inf outside the prior support."""
    priors = priors or GrowthPriors(error_family="gaussian")
    if not in_support(params, priors):
        return -math.inf
    arr = ClusterArrays.from_clusters(clusters)
    mu = (arr.X @ params.beta) * saturation(arr.v, params.gamma, params.alpha)
    return float(np.sum(_loglik_terms(arr.g - mu, params.tau, params.delta, params.omega, priors.skew)))


def growth_loglik_grad_beta(params: GrowthParams, clusters) -> np.ndarray:
    """Gradient of the Gaussian log likelihood in beta."""
    arr = ClusterArrays.from_clusters(clusters)
    h = saturation(arr.v, params.gamma, params.alpha)
    resid = arr.g - (arr.X @ params.beta) * h
    return (arr.X * h[:, None]).T @ resid / params.tau


# ---------------------------------------------------------------- sampler


@dataclass
class GrowthMCMCConfig:
    burnin: int = 2000
    draws: int = 1000
    thin: int = 1
    seed: int = 0
    adapt_interval: int = 50
    init_jitter: float = 0.0
    prior_only: bool = False
    min_accept: float = 0.01

    def __post_init__(self):
        if self.burnin < 0 or self.draws < 1 or self.thin < 1:
            raise ValidationError("invalid growth sampler lengths")


@dataclass
class GrowthPosterior:
    names: list[str]
    draws: np.ndarray
    acceptance: dict[str, float]
    burnin: int
    thin: int
    seed: int
    family: str
    n_clusters: int
    b_gamma: float
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.draws)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def params(self, i: int) -> GrowthParams:
        row = dict(zip(self.names, self.draws[i]))
        beta = np.array([row[n] for n in self.names if n.startswith("beta_")])
        return GrowthParams(row["alpha"], row["gamma"], beta, row["tau"],
                            row.get("delta", 0.0), row.get("omega", math.inf))


def param_names(p1: int, skew: bool) -> list[str]:
    names = ["alpha", "gamma"] + [f"beta_{k}" for k in range(p1)] + ["tau"]
    return names + (["delta", "omega"] if skew else [])


class _Target:
    """Log posterior on the unconstrained scale with cached saturation term."""

    def __init__(self, arr: ClusterArrays, priors: GrowthPriors, prior_only: bool):
        self.arr = arr
        self.pr = priors
        self.prior_only = prior_only
        self.p1 = arr.p1
        self.skew = priors.skew
        self.mu_b, self.s2_b = priors.beta_prior(self.p1)
        self.logv = np.log(arr.v)
        P = self.p1 + 3 + (2 if self.skew else 0)
        self.P = P
        self.i_alpha, self.i_gamma = 0, 1
        self.i_beta = np.arange(2, 2 + self.p1)
        self.i_tau = 2 + self.p1
        self.blocks = {
            "beta": self.i_beta,
            "gamma_alpha": np.array([self.i_gamma, self.i_alpha]),
            "error": np.arange(self.i_tau, P),
            # joint move along the beta_0 / gamma / alpha ridge
            "mean": np.concatenate([[self.i_alpha, self.i_gamma], self.i_beta]),
        }

    # transforms -------------------------------------------------------
    def natural(self, u):
        pr = self.pr
        th = np.empty(self.P)
        th[0] = pr.c_alpha + (pr.d_alpha - pr.c_alpha) * special.expit(u[0])
        th[1] = pr.a_gamma + (pr.b_gamma - pr.a_gamma) * special.expit(u[1])
        th[self.i_beta] = u[self.i_beta]
        th[self.i_tau] = pr.b_tau * special.expit(u[self.i_tau])
        if self.skew:
            th[self.i_tau + 1] = 2 * special.expit(u[self.i_tau + 1]) - 1
            th[self.i_tau + 2] = 2 + math.exp(u[self.i_tau + 2])
        return th

    def unconstrained(self, th):
        pr = self.pr
        u = np.empty(self.P)
        u[0] = special.logit((th[0] - pr.c_alpha) / (pr.d_alpha - pr.c_alpha))
        u[1] = special.logit((th[1] - pr.a_gamma) / (pr.b_gamma - pr.a_gamma))
        u[self.i_beta] = th[self.i_beta]
        u[self.i_tau] = special.logit(th[self.i_tau] / pr.b_tau)
        if self.skew:
            u[self.i_tau + 1] = special.logit((th[self.i_tau + 1] + 1) / 2)
            u[self.i_tau + 2] = math.log(th[self.i_tau + 2] - 2)
        return u

    @staticmethod
    def _logit_jac(x):
        # log d/du expit(u) = -softplus(u) - softplus(-u)
        return -np.logaddexp(0.0, x) - np.logaddexp(0.0, -x)

    def log_prior(self, u, th) -> float:
        pr = self.pr
        lp = 0.0
        # alpha: scaled Beta on [c, d]; logit Jacobian
        z = special.expit(u[0])
        lp += (pr.a_alpha - 1) * math.log(z) + (pr.b_alpha - 1) * math.log1p(-z)
        lp += self._logit_jac(u[0])
        # gamma: uniform; logit Jacobian
        lp += self._logit_jac(u[1])
        b = th[self.i_beta]
        lp += -0.5 * float(np.sum((b - self.mu_b) ** 2 / self.s2_b))
        lp += self._logit_jac(u[self.i_tau])
        if self.skew:
            d = th[self.i_tau + 1]
            lp += -0.5 * d * d / pr.sigma2_delta + self._logit_jac(u[self.i_tau + 1])
            w = th[self.i_tau + 2] - 2
            lp += math.log(w) - pr.b_omega * w + u[self.i_tau + 2]
        return float(lp)

    def saturation(self, th):
        return special.expit(th[0] * (self.logv - math.log(th[1])))

    def log_lik(self, th, h) -> float:
        if self.prior_only:
            return 0.0
        mu = (self.arr.X @ th[self.i_beta]) * h
        if self.skew:
            d, w = th[self.i_tau + 1], th[self.i_tau + 2]
        else:
            d, w = 0.0, math.inf
        try:
            terms = _loglik_terms(self.arr.g - mu, th[self.i_tau], d, w, self.skew)
        except (InvalidTailParameter, ValidationError):
            return -math.inf
        val = float(np.sum(terms))
        return val if math.isfinite(val) else -math.inf


def _initial_point(arr: ClusterArrays, priors: GrowthPriors) -> np.ndarray:
    """Profile least squares over a small (gamma, alpha) grid."""
    pr = priors
    best = None
    gam_grid = np.clip(np.quantile(arr.v, [0.05, 0.25, 0.5]), pr.a_gamma * 1.01 + 1e-6,
                       pr.a_gamma + 0.99 * (pr.b_gamma - pr.a_gamma))
    alpha_grid = np.clip([0.75, 1.0, 1.5, 2.5], pr.c_alpha * 1.01, pr.d_alpha * 0.99)
    for gam in gam_grid:
        for al in alpha_grid:
            h = special.expit(al * (np.log(arr.v) - math.log(gam)))
            H = arr.X * h[:, None]
            beta, *_ = np.linalg.lstsq(H, arr.g, rcond=None)
            rss = float(np.sum((arr.g - H @ beta) ** 2))
            if best is None or rss < best[0]:
                best = (rss, al, gam, beta)
    rss, al, gam, beta = best
    tau = float(np.clip(rss / max(len(arr) - arr.p1, 1), 1e-3 * pr.b_tau, 0.5 * pr.b_tau))
    th = [al, gam, *beta, tau]
    if pr.skew:
        th += [0.0, 10.0]
    return np.array(th, dtype=float)


def _target_accept(d: int) -> float:
    return 0.44 if d == 1 else (0.35 if d <= 3 else 0.25)


def fit_growth(clusters, priors: GrowthPriors, config: GrowthMCMCConfig,
               rng: np.random.Generator | None = None, init: np.ndarray | None = None) -> GrowthPosterior:
    """Adaptive blockwise random-walk Metropolis.

    Blocks are (beta), (gamma, alpha), (tau[, delta, omega]) and a joint
    (alpha, gamma, beta) move for the strongly correlated mean parameters.
    """
    arr = ClusterArrays.from_clusters(clusters)
    if len(arr) < arr.p1 + 1:
        raise ValidationError(f"need at least {arr.p1 + 1} growth clusters, got {len(arr)}")
    priors = priors.resolved(arr.v)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    tgt = _Target(arr, priors, config.prior_only)
    th0 = init if init is not None else _initial_point(arr, priors)
    u = tgt.unconstrained(th0)
    if config.init_jitter > 0:
        u = u + config.init_jitter * rng.standard_normal(len(u))
    th = tgt.natural(u)
    h = tgt.saturation(th)
    ll = tgt.log_lik(th, h)
    lp = tgt.log_prior(u, th)

    # starting proposal covariances
    cov = {}
    H = arr.X * h[:, None]
    try:
        cb = np.linalg.inv(H.T @ H / th[tgt.i_tau] + np.diag(1 / tgt.s2_b))
    except np.linalg.LinAlgError:
        cb = np.eye(arr.p1) * 0.01
    cov["beta"] = cb
    cov["gamma_alpha"] = np.eye(2) * 0.05
    cov["error"] = np.eye(len(tgt.blocks["error"])) * 0.02
    cov["mean"] = np.zeros((arr.p1 + 2, arr.p1 + 2))
    cov["mean"][:2, :2] = np.diag([0.05, 0.05])
    cov["mean"][2:, 2:] = cb
    if config.prior_only:
        cov = {k: np.eye(len(v)) for k, v in tgt.blocks.items()}
    names = list(tgt.blocks)
    log_scale = {k: math.log(2.38 / math.sqrt(len(tgt.blocks[k]))) for k in names}
    chol = {k: np.linalg.cholesky(cov[k] + 1e-12 * np.eye(len(cov[k]))) for k in names}
    acc = {k: 0 for k in names}
    acc_burn = {k: 0 for k in names}
    adapted = set()
    total = config.burnin + config.draws * config.thin
    hist = np.empty((config.burnin, tgt.P)) if config.burnin else None
    out = np.empty((config.draws, tgt.P))
    trace_ll = np.empty(total)
    # separate variates per block: blocks overlap, and reuse within a sweep would
    # make later proposals depend on earlier accept decisions
    normals = {k: rng.standard_normal((total, len(tgt.blocks[k]))) for k in names}
    logu = np.log(rng.random((total, len(names))))

    kept = 0
    for it in range(total):
        for bi, name in enumerate(names):
            idx = tgt.blocks[name]
            prop = u.copy()
            step = math.exp(log_scale[name]) * (chol[name] @ normals[name][it])
            prop[idx] += step
            th_p = tgt.natural(prop)
            h_p = h if name in ("beta", "error") else tgt.saturation(th_p)
            lp_p = tgt.log_prior(prop, th_p)
            ll_p = tgt.log_lik(th_p, h_p)
            a = (ll_p + lp_p) - (ll + lp)
            ok = math.isfinite(a) and logu[it, bi] < a
            if ok:
                u, th, h, ll, lp = prop, th_p, h_p, ll_p, lp_p
                acc[name] += 1
                if it < config.burnin:
                    acc_burn[name] += 1
            if it < config.burnin:
                eta = min(0.05, 1.0 / math.sqrt(it + 1))
                log_scale[name] += eta * ((1.0 if ok else 0.0) - _target_accept(len(idx)))
        trace_ll[it] = ll
        if it < config.burnin:
            hist[it] = u
            if (it + 1) % config.adapt_interval == 0 and it >= 200:
                lo = (it + 1) // 2
                for name in names:
                    idx = tgt.blocks[name]
                    c = np.atleast_2d(np.cov(hist[lo:it + 1][:, idx], rowvar=False))
                    c = c + 1e-10 * np.eye(len(idx))
                    try:
                        chol[name] = np.linalg.cholesky(c)
                    except np.linalg.LinAlgError:
                        continue
                    if name not in adapted:
                        # first empirical covariance: restart the scale at the optimal-scaling value
                        adapted.add(name)
                        log_scale[name] = math.log(2.38 / math.sqrt(len(idx)))
        elif (it - config.burnin) % config.thin == config.thin - 1:
            out[kept] = th
            kept += 1
        if it + 1 == config.burnin:
            rates = {k: acc_burn[k] / config.burnin for k in names}
            if config.burnin >= 100 and min(rates.values()) < config.min_accept:
                raise PoorMixing(f"burn-in acceptance too low: {rates}", trace=trace_ll[:it + 1].copy())
    post_iters = max(total - config.burnin, 1)
    acceptance = {k: (acc[k] - acc_burn[k]) / post_iters for k in names}
    return GrowthPosterior(names=param_names(arr.p1, tgt.skew), draws=out, acceptance=acceptance,
                           burnin=config.burnin, thin=config.thin, seed=config.seed,
                           family=priors.error_family, n_clusters=len(arr), b_gamma=float(priors.b_gamma))


def gelman_rubin(chains) -> np.ndarray:
    """Potential scale reduction per column for an (m, n, P) stack of chains."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    m, n = x.shape[:2]
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * W + B / n
    return np.sqrt(var_hat / W)


def prior_draws(priors: GrowthPriors, p1: int, size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Independent prior draws of each parameter (used by calibration checks)."""
    pr = priors
    if pr.b_gamma is None:
        raise ValidationError("b_gamma must be set to draw from the prior")
    mu, s2 = pr.beta_prior(p1)
    out = {
        "alpha": pr.c_alpha + (pr.d_alpha - pr.c_alpha) * rng.beta(pr.a_alpha, pr.b_alpha, size),
        "gamma": rng.uniform(pr.a_gamma, pr.b_gamma, size),
        "tau": rng.uniform(0, pr.b_tau, size),
    }
    for k in range(p1):
        out[f"beta_{k}"] = rng.normal(mu[k], math.sqrt(s2[k]), size)
    if pr.skew:
        sd = math.sqrt(pr.sigma2_delta)
        out["delta"] = stats.truncnorm.rvs(-1 / sd, 1 / sd, scale=sd, size=size, random_state=rng)
        out["omega"] = 2 + rng.gamma(2.0, 1 / pr.b_omega, size)
    return out
