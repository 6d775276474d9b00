"""Command-line entry point: ``treelink <subcommand> --config C --seed S --out DIR``.

Exit status is 0 on success, 1 for validation errors and 2 for numerical
failures. Errors are written to stderr as one JSON line with a ``code`` field.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import NumericalFailure, TreelinkError, ValidationError
from .evaluation import eval_coverage, eval_links, eval_posterior_links, pairs_from_labels
from .experiments import Settings, ndm_pair_keys, run_suite, settings_from_dict, truth_values, write_rows
from .io import (SCHEMA_VERSION, RunArchive, linkage_archive, linkage_from_archive, load_config, read_dataset,
                 write_dataset, write_json)
from .linkage import prepare_data, run_gibbs
from .pipeline import fit_fixed, fit_ndm, growth_inputs, interval_table, ndm_link, run_la, summarize
from .simgen import generate_dataset
from .spatial import Domain

log = logging.getLogger("treelink")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; usage errors here are validation errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _report(ValidationError(message))
        raise SystemExit(1)


def _report(exc: TreelinkError) -> None:
    line = {"code": exc.code, "exit_status": exc.exit_status, "message": str(exc)}
    line.update({k: v for k, v in getattr(exc, "details", {}).items() if isinstance(v, (int, float, str))})
    print(json.dumps(line, sort_keys=True), file=sys.stderr)


def _settings(args) -> Settings:
    cfg = load_config(args.config) if args.config else {"schema_version": SCHEMA_VERSION}
    return settings_from_dict(cfg, seed=args.seed)


def _domain(st: Settings) -> Domain | None:
    d = (st.raw or {}).get("domain")
    if d is None:
        return None
    if len(d) != 4:
        raise ValidationError("domain must be [xmin, ymin, xmax, ymax]")
    return Domain(*map(float, d))


def _load(args, st: Settings):
    if not args.data:
        raise ValidationError("--data is required for this subcommand")
    ds = read_dataset(args.data, _domain(st))
    data = prepare_data(ds.files, ds.domain, st.linkage_priors)
    return ds, data


def _growth_archive(kind, st, post, extra_arrays=None, summaries=None, diagnostics=None):
    lvl = st.suite.level
    return RunArchive(
        kind=kind, config=st.raw or {}, seed=st.la.seed,
        arrays={"draws": post.draws, **(extra_arrays or {})},
        summaries={"names": list(post.names), "level": lvl, "summary": summarize(post.names, post.draws, lvl),
                   **(summaries or {})},
        diagnostics={"acceptance": post.acceptance, **(diagnostics or {})},
    )


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args, st: Settings) -> dict:
    ds = generate_dataset(st.sim)
    meta = {"simulation": st.sim.to_dict(), "truth": truth_values(st.sim),
            "n_recruits": int(ds.truth.is_recruit.sum())}
    write_dataset(args.out, ds.files, ds.domain, ds.rasters, ds.truth.latent_of, meta)
    return {"n1": len(ds.files[0]), "n2": len(ds.files[1])}


def cmd_link(args, st: Settings) -> dict:
    ds, _ = _load(args, st)
    post = run_gibbs(ds.files, st.linkage_priors, st.sampler, ds.domain)
    arch = linkage_archive(post, st.raw or {}, timings=st.record_timings)
    if ds.truth is not None:
        res = eval_posterior_links(post.lam_draws, ds.truth)
        arch.summaries["links"] = {"precision": res.precision, "recall": res.recall,
                                   "precision_quartiles": res.per_draw["precision_quartiles"],
                                   "recall_quartiles": res.per_draw["recall_quartiles"]}
    arch.write(args.out)
    return {"draws": post.n_draws}


def cmd_growth(args, st: Settings) -> dict:
    ds, data = _load(args, st)
    if args.source == "truth":
        if ds.truth is None:
            raise ValidationError("--source truth needs a dataset with truth.csv")
        lam = np.unique(ds.truth, return_inverse=True)[1]
        s = _centroids(lam, data.y)
    elif args.source == "archive":
        if not args.linkage:
            raise ValidationError("--source archive needs --linkage")
        post = linkage_from_archive(RunArchive.read(args.linkage))
        if not 0 <= args.draw < post.n_draws:
            raise ValidationError(f"--draw must lie in [0, {post.n_draws})")
        lam, s = post.lam_draws[args.draw], post.s_draws[args.draw]
    else:
        res = fit_ndm(data, ds.rasters, st.growth_priors, st.la)
        arch = _growth_archive("growth", st, res.posterior, summaries={"source": "ndm",
                               "n_clusters": len(res.clusters)})
        arch.write(args.out)
        return {"clusters": len(res.clusters)}
    _, arr = growth_inputs(lam, s, data, ds.rasters, st.la)
    post = fit_fixed(arr, data, st.growth_priors, st.la)
    arch = _growth_archive("growth", st, post, summaries={"source": args.source,
                           "n_clusters": 0 if arr is None else len(arr)})
    arch.write(args.out)
    return {"clusters": len(arr)}


def _centroids(labels, y) -> np.ndarray:
    """Cluster-mean record locations, indexed by label."""
    labels = np.asarray(labels)
    out = np.zeros((labels.max() + 1, 2))
    cnt = np.bincount(labels, minlength=len(out))
    for d in range(2):
        out[:, d] = np.bincount(labels, weights=y[:, d], minlength=len(out))
    return out / np.maximum(cnt, 1)[:, None]


def cmd_la(args, st: Settings) -> dict:
    ds, data = _load(args, st)
    if not args.linkage:
        raise ValidationError("la needs --linkage pointing at a linkage archive")
    post = linkage_from_archive(RunArchive.read(args.linkage))
    if post.lam_draws.shape[1] != data.n:
        raise ValidationError("linkage archive does not match the records")
    cfg = replace(st.la, workers=max(args.threads, st.la.workers))
    pooled = run_la(post, data, ds.rasters, st.growth_priors, cfg)
    arch = _growth_archive("la", st, pooled,
                           extra_arrays={"tags": pooled.tags, "linkage_draws": pooled.linkage_draws},
                           diagnostics={"skipped": pooled.skipped, "n_clusters": pooled.n_clusters})
    arch.write(args.out)
    return {"rows": len(pooled.draws), "skipped": len(pooled.skipped)}


def cmd_ndm(args, st: Settings) -> dict:
    ds, data = _load(args, st)
    f1, f2 = ds.files
    if ds.rasters:
        res = fit_ndm(data, ds.rasters, st.growth_priors, st.la)
    else:
        res = ndm_link(f1, f2)
    ids = np.column_stack([f1.record_ids[res.pairs[:, 0]], f2.record_ids[res.pairs[:, 1]]])
    arrays = {"pairs": res.pairs, "pair_record_ids": ids, "distances": res.distances}
    if res.posterior is not None:
        arch = _growth_archive("ndm", st, res.posterior, extra_arrays=arrays,
                               summaries={"n_clusters": len(res.clusters)})
    else:
        arch = RunArchive("ndm", st.raw or {}, st.la.seed, arrays, {"n_pairs": len(res.pairs)}, {})
    arch.write(args.out)
    return {"pairs": len(res.pairs)}


def cmd_evaluate(args, st: Settings) -> dict:
    ds, data = _load(args, st)
    if ds.truth is None:
        raise ValidationError("evaluate needs a dataset with truth.csv")
    if not args.archives:
        raise ValidationError("evaluate needs at least one --archive")
    truth_pairs = pairs_from_labels(ds.truth)
    tv = ds.meta.get("truth") or truth_values(st.sim)
    lvl = st.suite.level
    link_rows, cov_rows = [], []
    for path in args.archives:
        arch = RunArchive.read(path)
        name = Path(path).name
        if arch.kind == "linkage":
            res = eval_posterior_links(arch.arrays["lam_draws"], ds.truth)
            link_rows.append({"archive": name, "kind": arch.kind, "precision": res.precision,
                              "recall": res.recall, "tp": res.tp, "fp": res.fp, "fn": res.fn})
            continue
        if arch.kind == "ndm":
            res = eval_links(ndm_pair_keys(arch.arrays["pairs"], len(ds.files[0]), data.n),
                             truth_pairs)
            link_rows.append({"archive": name, "kind": arch.kind, "precision": res.precision,
                              "recall": res.recall, "tp": res.tp, "fp": res.fp, "fn": res.fn})
        if "draws" in arch.arrays:
            names = arch.summaries["names"]
            ints = interval_table(names, arch.arrays["draws"], lvl)
            cov = eval_coverage([ints], {k: v for k, v in tv.items() if k in ints})
            for k in cov.truth:
                lo, hi = ints[k]
                cov_rows.append({"archive": name, "kind": arch.kind, "param": k, "truth": float(cov.truth[k]),
                                 "lo": lo, "hi": hi, "covered": cov.hits[k]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "links.csv", link_rows)
    write_rows(out / "coverage.csv", cov_rows)
    write_json(out / "metrics.json", {"schema_version": SCHEMA_VERSION, "level": lvl, "links": link_rows,
                                      "coverage": cov_rows})
    return {"link_rows": len(link_rows), "coverage_rows": len(cov_rows)}


def cmd_suite(args, st: Settings) -> dict:
    rows = run_suite(st, args.out, threads=args.threads,
                     progress=lambda tag, row: log.info("finished %s", tag))
    return {"replicates": len(rows)}


COMMANDS = {
    "simulate": (cmd_simulate, "simulate a two-survey dataset with known truth"),
    "link": (cmd_link, "run the linkage sampler on a dataset"),
    "growth": (cmd_growth, "fit the growth model under one fixed linkage"),
    "la": (cmd_la, "linkage-averaged growth fit from a linkage archive"),
    "ndm": (cmd_ndm, "nearest-distance matching baseline"),
    "evaluate": (cmd_evaluate, "link metrics and interval coverage against truth"),
    "suite": (cmd_suite, "replicated simulation study"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treelink", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(COMMANDS) + "}")
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config with a schema_version field")
        sp.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")
        if name not in ("simulate", "suite"):
            sp.add_argument("--data", help="dataset directory (or records CSV with a domain in the config)")
        if name in ("growth", "la"):
            sp.add_argument("--linkage", help="linkage archive directory")
        if name == "growth":
            sp.add_argument("--source", choices=("archive", "truth", "ndm"), default="archive")
            sp.add_argument("--draw", type=int, default=0, help="retained linkage draw to condition on")
        if name == "evaluate":
            sp.add_argument("--archive", dest="archives", action="append", default=[])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        _report(ValidationError("no subcommand given"))
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        _report(ValidationError("--threads must be at least 1"))
        return 1
    fn = COMMANDS[args.command][0]
    try:
        st = _settings(args)
        info = fn(args, st)
    except TreelinkError as exc:
        _report(exc)
        return exc.exit_status
    except OSError as exc:
        _report(ValidationError(f"{exc.filename}: {exc.strerror}"))
        return 1
    except FloatingPointError as exc:
        _report(NumericalFailure(str(exc)))
        return 2
    print(json.dumps({"command": args.command, "out": str(args.out), **info}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
