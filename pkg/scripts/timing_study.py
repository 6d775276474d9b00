"""Seconds per sampler iteration against record count and box half-width.

    python scripts/timing_study.py --sizes 200 400 800 --boxes 1 3 none
"""

import argparse
import math

from treelink.evaluation import timing_report
from treelink.linkage import LinkagePriors, SamplerConfig, run_gibbs
from treelink.simgen import SimConfig, generate_dataset


def instance(n_total, density, seed):
    side = math.sqrt(n_total / 2 / density)
    ds = generate_dataset(SimConfig(density=density, domain_side=side + 20, window_side=side, seed=seed))
    return ds.files, ds.domain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 400, 800])
    ap.add_argument("--boxes", nargs="+", default=["1", "3", "none"])
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--density", type=float, default=0.06)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    boxes = [None if b.lower() == "none" else float(b) for b in args.boxes]
    priors = LinkagePriors()
    results = []
    for n in args.sizes:
        files, domain = instance(n, args.density, args.seed)
        n_rec = sum(len(f) for f in files)
        for box in boxes:
            cfg = SamplerConfig(iterations=args.iterations, burnin=args.iterations // 2, thin=10,
                                box_half_width=box, seed=args.seed)
            run_gibbs(files, priors, SamplerConfig(iterations=10, burnin=5, thin=5, box_half_width=box), domain)
            best = min(run_gibbs(files, priors, cfg, domain).seconds_per_iteration for _ in range(args.repeats))
            results.append({"n": n_rec, "box": box, "seconds_per_iteration": best})

    print(f"{'n':>6} {'box':>6} {'ms/iter':>9} {'speedup':>8}")
    for r in timing_report(results):
        sp = "" if r["speedup"] is None else f"{r['speedup']:.1f}"
        box = "none" if r["box"] is None else f"{r['box']:g}"
        print(f"{r['n']:>6} {box:>6} {r['seconds_per_iteration'] * 1e3:9.2f} {sp:>8}")


if __name__ == "__main__":
    main()
