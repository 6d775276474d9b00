"""Config assembly, single simulated replicates and the replicated suite."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .evaluation import eval_coverage, eval_links, eval_posterior_links, pairs_from_labels, pairs_to_keys
from .growth import GrowthPriors
from .io import SCHEMA_VERSION, RunArchive, write_json
from .linkage import LinkagePriors, SamplerConfig, prepare_data, run_gibbs
from .pipeline import LAConfig, fit_fixed, fit_ndm, growth_inputs, interval_table, run_la, summarize
from .simgen import SimConfig, generate_dataset


def build(cls, section: dict | None, **override):
    """Instantiate a config dataclass, rejecting unknown keys."""
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise SchemaError(f"unknown {cls.__name__} keys: {unknown}")
    section.update({k: v for k, v in override.items() if v is not None})
    for k, v in list(section.items()):
        if isinstance(v, list):
            section[k] = tuple(v)
    return cls(**section)


@dataclass
class SuiteConfig:
    replicates: int = 2
    densities: tuple = (0.06,)
    noises: tuple = (0.25,)
    alphas: tuple = (1.0,)
    level: float = 0.9
    baseline_draws: int | None = None


@dataclass
class Settings:
    sim: SimConfig
    linkage_priors: LinkagePriors
    sampler: SamplerConfig
    growth_priors: GrowthPriors
    la: LAConfig
    suite: SuiteConfig
    record_timings: bool = False
    raw: dict | None = None


def settings_from_dict(cfg: dict, seed: int | None = None) -> Settings:
    cfg = dict(cfg or {})
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}")
    allowed = {"schema_version", "simulation", "linkage_priors", "sampler", "growth_priors", "la",
               "suite", "record_timings", "domain"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise SchemaError(f"unknown config sections: {unknown}")
    return Settings(
        sim=build(SimConfig, cfg.get("simulation"), seed=seed),
        linkage_priors=build(LinkagePriors, cfg.get("linkage_priors")),
        sampler=build(SamplerConfig, cfg.get("sampler"), seed=seed),
        growth_priors=build(GrowthPriors, {"error_family": "gaussian", **(cfg.get("growth_priors") or {})}),
        la=build(LAConfig, cfg.get("la"), seed=seed),
        suite=build(SuiteConfig, cfg.get("suite")),
        record_timings=bool(cfg.get("record_timings", False)),
        raw=cfg,
    )


def truth_values(sim: SimConfig) -> dict[str, float]:
    out = {"alpha": sim.alpha, "gamma": sim.gamma, "tau": sim.tau}
    out.update({f"beta_{k}": b for k, b in enumerate(sim.beta)})
    return out


def ndm_pair_keys(pairs, n1: int, n: int) -> np.ndarray:
    """Pair keys for NDM (file-1 row, file-2 row) matches in stacked record order."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return pairs_to_keys(np.column_stack([pairs[:, 0], n1 + pairs[:, 1]]), n)


def run_replicate(st: Settings) -> tuple[RunArchive, dict]:
    """Simulate one dataset and run linkage averaging, NDM and the true-linkage fit on it."""
    t0 = time.perf_counter()
    ds = generate_dataset(st.sim)
    data = prepare_data(ds.files, ds.domain, st.linkage_priors)
    post = run_gibbs(ds.files, st.linkage_priors, st.sampler, ds.domain)
    t_link = time.perf_counter()
    truth = ds.truth.partition()
    la_links = eval_posterior_links(post.lam_draws, truth)
    la = run_la(post, data, ds.rasters, st.growth_priors, st.la)
    t_la = time.perf_counter()

    base_draws = st.suite.baseline_draws or st.la.l
    ndm = fit_ndm(data, ds.rasters, st.growth_priors, st.la, draws=base_draws)
    ndm_links = eval_links(ndm_pair_keys(ndm.pairs, len(ds.files[0]), data.n), pairs_from_labels(truth))
    _, tl_arr = growth_inputs(truth, ds.truth.latents, data, ds.rasters, st.la)
    tl = fit_fixed(tl_arr, data, st.growth_priors, st.la, draws=base_draws)
    t_end = time.perf_counter()

    lvl = st.suite.level
    tv = truth_values(st.sim)
    ints = {
        "la": interval_table(la.names, la.draws, lvl),
        "ndm": interval_table(ndm.posterior.names, ndm.posterior.draws, lvl),
        "tl": interval_table(tl.names, tl.draws, lvl),
    }
    row = {
        "density": st.sim.density, "noise": st.sim.sigma_obs, "alpha_true": st.sim.alpha, "seed": st.sim.seed,
        "n1": len(ds.files[0]), "n2": len(ds.files[1]),
        "la_precision": la_links.precision, "la_recall": la_links.recall,
        "ndm_precision": ndm_links.precision, "ndm_recall": ndm_links.recall,
        "la_clusters_mean": float(np.mean([c for c in la.n_clusters if c])), "la_skipped": len(la.skipped),
        "ndm_clusters": len(ndm.clusters), "tl_clusters": len(tl_arr),
    }
    for method, table in ints.items():
        for name, value in tv.items():
            lo, hi = table[name]
            row[f"{method}_{name}_lo"] = lo
            row[f"{method}_{name}_hi"] = hi
            row[f"{method}_{name}_covered"] = int(lo <= value <= hi)
    arch = RunArchive(
        kind="replicate",
        config=st.raw or {},
        seed=st.sim.seed,
        arrays={
            "la_draws": la.draws, "la_tags": la.tags, "ndm_draws": ndm.posterior.draws, "tl_draws": tl.draws,
            "la_precision": la_links.per_draw["precision"], "la_recall": la_links.per_draw["recall"],
            "sigma2_trace": post.sigma2_trace, "t_trace": post.t_trace, "theta_trace": post.theta_trace,
        },
        summaries={"row": row, "intervals": ints, "truth": tv, "names": la.names,
                   "la": summarize(la.names, la.draws, lvl),
                   "ndm": summarize(ndm.posterior.names, ndm.posterior.draws, lvl),
                   "tl": summarize(tl.names, tl.draws, lvl)},
        diagnostics={**post.diagnostics, "la_skipped": la.skipped, "la_clusters": la.n_clusters,
                     "ndm_acceptance": ndm.posterior.acceptance, "tl_acceptance": tl.acceptance},
        timings=({"linkage_s": t_link - t0, "la_s": t_la - t_link, "baselines_s": t_end - t_la,
                  "seconds_per_iteration": post.seconds_per_iteration} if st.record_timings else None),
    )
    return arch, row


def replicate_seed(base: int, cell: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(base), cell, rep]).generate_state(1)[0])


def suite_jobs(st: Settings):
    jobs = []
    cell = 0
    for d in st.suite.densities:
        for s in st.suite.noises:
            for a in st.suite.alphas:
                for rep in range(st.suite.replicates):
                    seed = replicate_seed(st.sim.seed, cell, rep)
                    job = replace(st, sim=replace(st.sim, density=float(d), sigma_obs=float(s),
                                                  alpha=float(a), seed=seed),
                                  sampler=replace(st.sampler, seed=seed), la=replace(st.la, seed=seed))
                    jobs.append((f"d{d}_s{s}_a{a}_r{rep:03d}", job))
                cell += 1
    return jobs


def _job(args):
    tag, job = args
    arch, row = run_replicate(job)
    return tag, arch, row


def run_suite(st: Settings, out, threads: int = 1, progress=None) -> list[dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = suite_jobs(st)
    rows = []

    def collect(tag, arch, row):
        arch.write(out / "replicates" / tag)
        rows.append({"replicate": tag, **row})
        if progress:
            progress(tag, row)

    if threads > 1:
        with ProcessPoolExecutor(threads) as ex:
            for tag, arch, row in ex.map(_job, jobs):
                collect(tag, arch, row)
    else:
        for j in jobs:
            collect(*_job(j))
    write_rows(out / "aggregate.csv", rows)
    cov = coverage_rows(rows, st)
    write_rows(out / "coverage.csv", cov)
    write_json(out / "summary.json", {"coverage": cov, "links": link_summary(rows)})
    return rows


def write_rows(path, rows) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def coverage_rows(rows, st: Settings) -> list[dict]:
    out = []
    keys = sorted({(r["density"], r["noise"], r["alpha_true"]) for r in rows})
    for d, s, a in keys:
        sub = [r for r in rows if (r["density"], r["noise"], r["alpha_true"]) == (d, s, a)]
        tv = truth_values(replace(st.sim, alpha=a))
        for method in ("tl", "la", "ndm"):
            sets = [{k: (r[f"{method}_{k}_lo"], r[f"{method}_{k}_hi"]) for k in tv} for r in sub]
            res = eval_coverage(sets, tv)
            for k in tv:
                out.append({"density": d, "noise": s, "alpha_true": a, "method": method, "param": k,
                            "intervals": res.intervals[k], "hits": res.hits[k],
                            "coverage": res.coverage.get(k, float("nan"))})
    return out


def link_summary(rows) -> dict:
    out = {}
    for key in ("la_precision", "la_recall", "ndm_precision", "ndm_recall"):
        vals = np.array([r[key] for r in rows], dtype=float)
        out[key] = {"mean": float(vals.mean()), "quartiles": np.quantile(vals, [0.25, 0.5, 0.75]).tolist()}
    return out
