import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats
from scipy.spatial import cKDTree

from treelink.errors import PackingInfeasible, ValidationError
from treelink.growth import saturation
from treelink.simgen import (SimConfig, covariate_matrix, generate_dataset, generate_latents, generate_recruits,
                             generate_observation)


class CountingRng:
    """Wraps a Generator and counts location proposals."""

    def __init__(self, seed):
        self.g = np.random.default_rng(seed)
        self.proposals = 0

    def uniform(self, *a, **k):
        self.proposals += 1
        return self.g.uniform(*a, **k)

    def __getattr__(self, name):
        return getattr(self.g, name)


def close_to_earlier(pts, r):
    """Flags points that landed within r of a previously accepted point."""
    tree = cKDTree(pts)
    flags = np.zeros(len(pts), bool)
    for i, j in tree.query_pairs(r):
        flags[max(i, j)] = True
    return flags


def test_suite_defaults():
    c = SimConfig()
    assert (c.gamma, c.beta, c.tau) == (12.0, (3.0, 0.5, -0.5, 0.5, -0.5), 0.5)
    assert (c.density, c.sigma_obs, c.domain_side, c.window_side) == (0.06, 0.25, 130.0, 100.0)


@pytest.mark.parametrize("kw", [{"density": 0}, {"softcore_violation_prob": 1.0}, {"sigma_obs": -1},
                                {"window_side": 200}, {"years": (2019, 2015)}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        SimConfig(**kw)


@pytest.mark.parametrize("density,side", [(0.06, 40.0), (0.04, 33.3), (0.08, 130.0)])
def test_latent_count_is_exact(density, side):
    cfg = SimConfig(density=density, domain_side=side, window_side=side)
    pts, marks = generate_latents(cfg, np.random.default_rng(0))
    assert len(pts) == len(marks) == math.ceil(density * side * side)


def test_hardcore_limit_has_no_violations():
    cfg = SimConfig(softcore_violation_prob=0.0, density=0.1, domain_side=60, window_side=60)
    pts, _ = generate_latents(cfg, np.random.default_rng(1))
    d, _ = cKDTree(pts).query(pts, k=2)
    assert d[:, 1].min() >= cfg.hardcore_radius


def test_violation_frequency_matches_probability():
    p = 0.2
    cfg = SimConfig(softcore_violation_prob=p, density=0.3, domain_side=60, window_side=60)
    rng = CountingRng(3)
    pts, _ = generate_latents(cfg, rng)
    accepted_close = int(close_to_earlier(pts, cfg.hardcore_radius).sum())
    close_proposals = rng.proposals - (len(pts) - accepted_close)
    sd = math.sqrt(p * (1 - p) / close_proposals)
    assert close_proposals > 1000
    assert abs(accepted_close / close_proposals - p) < 3 * sd


def test_packing_infeasible():
    cfg = SimConfig(softcore_violation_prob=0.0, density=2.0, domain_side=10, window_side=10, max_rejections=2000)
    with pytest.raises(PackingInfeasible):
        generate_latents(cfg, np.random.default_rng(0))


def test_nearest_neighbour_distances_dominate_binomial():
    cfg = SimConfig()
    rng = np.random.default_rng(5)
    pts, _ = generate_latents(cfg, rng)
    ref = rng.uniform(0, cfg.domain_side, pts.shape)
    inner = lambda p: p[np.all((p > 10) & (p < cfg.domain_side - 10), axis=1)]  # noqa: E731
    nn = lambda p: cKDTree(p).query(inner(p), k=2)[0][:, 1]  # noqa: E731
    # alternative "less": the inhibited sample's CDF lies below, i.e. larger distances
    assert stats.ks_2samp(nn(pts), nn(ref), alternative="less").pvalue < 0.05


def test_marks_are_positive_and_right_skewed():
    _, marks = generate_latents(SimConfig(), np.random.default_rng(0))
    assert marks.min() > 0
    assert stats.skew(marks) > 0.5


def test_no_recruits_at_zero_rate():
    cfg = SimConfig(recruit_rate=0.0)
    pts, marks, parents = generate_recruits(np.ones((5, 2)), np.ones(5), cfg, np.random.default_rng(0))
    assert len(pts) == len(marks) == len(parents) == 0


def test_recruits_small_and_inside_square():
    cfg = SimConfig(recruit_rate=0.05, domain_side=20, window_side=20)
    rng = np.random.default_rng(0)
    lat = rng.uniform(0, 20, (30, 2))
    marks = rng.lognormal(3, 0.5, 30)
    pts, rmarks, parents = generate_recruits(lat, marks, cfg, rng)
    assert len(pts) == round(0.05 * marks.sum())
    assert np.all(rmarks < marks.min())
    assert np.all((pts >= 0) & (pts <= 20))


def test_parent_frequencies_proportional_to_marks():
    marks = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
    cfg = SimConfig(recruit_rate=10_000 / marks.sum())
    _, _, parents = generate_recruits(np.full((5, 2), 65.0), marks, cfg, np.random.default_rng(2))
    n = len(parents)
    assert n == 10_000
    p = marks / marks.sum()
    counts = np.bincount(parents, minlength=5)
    assert np.all(np.abs(counts - n * p) < 3 * np.sqrt(n * p * (1 - p)))


def test_recruit_offsets_are_cauchy():
    cfg = SimConfig(recruit_rate=1.0, domain_side=1e6, window_side=1e6)
    centre = np.array([[5e5, 5e5]])
    pts, _, _ = generate_recruits(centre, np.array([5000.0]), cfg, np.random.default_rng(0))
    off = (pts - centre).ravel()
    assert stats.kstest(off, stats.cauchy(0, cfg.recruit_scale).cdf).pvalue > 0.01


def observe(cfg, seed=0):
    rng = np.random.default_rng(seed)
    latents, marks = generate_latents(cfg, rng)
    rec, rmarks, _ = generate_recruits(latents, marks, cfg, rng)
    f1, f2, truth = generate_observation(latents, marks, rec, rmarks, [], cfg, rng)
    return f1, f2, truth


def test_noise_free_file1_equals_latents():
    cfg = SimConfig(sigma_obs=0.0, theta_true=0.0, t_true=(0, 0), domain_side=40, window_side=30, beta=(3.0,))
    f1, f2, truth = observe(cfg)
    np.testing.assert_array_equal(f1.locations, truth.latents[truth.latent_of[0]])
    np.testing.assert_allclose(f2.locations, truth.latents[truth.latent_of[1]], atol=1e-12)


def test_zero_tau_growth_is_deterministic():
    cfg = SimConfig(tau=0.0, domain_side=50, window_side=40, beta=(3.0,))
    f1, f2, truth = observe(cfg)
    lat = truth.latent_of[1]
    parent = ~truth.is_recruit[lat]
    m = truth.marks[lat[parent]]
    expected = np.maximum(m + 4 * 3.0 * saturation(m, cfg.gamma, cfg.alpha), cfg.volume_floor)
    np.testing.assert_allclose(f2.volumes[parent], expected, rtol=1e-12)


def test_recruits_only_in_file2(small_sim):
    t = small_sim.truth
    assert not t.is_recruit[t.latent_of[0]].any()
    assert t.is_recruit[t.latent_of[1]].any()


def test_truth_is_a_function(small_sim):
    t = small_sim.truth
    for i, f in enumerate(small_sim.files):
        assert len(t.latent_of[i]) == len(f)
        # at most one record per latent per file
        assert len(np.unique(t.latent_of[i])) == len(f)
        assert np.all(small_sim.domain.contains(f.locations))


def test_location_residuals_chi_square():
    cfg = SimConfig(sigma_obs=0.35)
    ds = generate_dataset(cfg)
    t = ds.truth
    r1 = ds.files[0].locations - t.latents[t.latent_of[0]]
    from treelink.spatial import apply_transform
    r2 = ds.files[1].locations - apply_transform(cfg.transform, t.latents[t.latent_of[1]])
    q = (np.vstack([r1, r2]) ** 2).sum(axis=1) / cfg.sigma_obs ** 2
    # window truncation conditions on the noisy location, so drop records near the edge
    keep = np.concatenate([ds.domain.distance_to_boundary(ds.files[i].locations) > 2 for i in (0, 1)])
    assert stats.kstest(q[keep], stats.chi2(2).cdf).pvalue > 0.01


def test_dataset_is_deterministic():
    a, b = generate_dataset(SimConfig(seed=9)), generate_dataset(SimConfig(seed=9))
    for fa, fb in zip(a.files, b.files):
        assert fa.locations.tobytes() == fb.locations.tobytes()
        assert fa.volumes.tobytes() == fb.volumes.tobytes()
    assert all(ra.values.tobytes() == rb.values.tobytes() for ra, rb in zip(a.rasters, b.rasters))
    assert generate_dataset(SimConfig(seed=10)).files[0].locations.tobytes() != a.files[0].locations.tobytes()


def test_covariates_standardized_over_window():
    ds = generate_dataset(SimConfig(seed=2))
    assert len(ds.rasters) == 4
    g = np.stack(np.meshgrid(np.arange(15.5, 115, 1.0), np.arange(15.5, 115, 1.0)), -1).reshape(-1, 2)
    X = covariate_matrix(ds.rasters, g)
    np.testing.assert_allclose(X.mean(axis=0), 0, atol=0.05)
    np.testing.assert_allclose(X.std(axis=0), 1, atol=0.05)


def test_survival_and_file_sizes_over_100_seeds():
    both, fractions, sizes = 0, [], []
    for seed in range(100):
        ds = generate_dataset(SimConfig(seed=seed))
        t = ds.truth
        inside = np.flatnonzero(ds.domain.contains(t.latents) & ~t.is_recruit)
        present = [np.isin(inside, t.latent_of[i]) for i in (0, 1)]
        fractions.append(np.mean(present[0] & present[1]))
        sizes.extend(len(f) for f in ds.files)
    assert np.mean(fractions) > 0.9
    target = 0.06 * 100 ** 2
    assert all(abs(s - target) <= 0.15 * target for s in sizes)


def test_covariate_mark_link():
    cfg = SimConfig(mark_effects=(0.5, 0.0), seed=3)
    ds = generate_dataset(cfg)
    t = ds.truth
    parent = ~t.is_recruit
    slope = np.polyfit(t.covariates[parent, 0], np.log(t.marks[parent]), 1)[0]
    assert slope == pytest.approx(0.5, abs=0.1)


def test_replace_keeps_validation():
    with pytest.raises(ValidationError):
        replace(SimConfig(), density=-1.0)
