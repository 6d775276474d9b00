"""Run the simulation suite from a config file and print coverage and linkage tables.

    python scripts/run_suite.py configs/acceptance_suite.json --out runs/suite
"""

import argparse
import csv
import time

from treelink.experiments import run_suite, settings_from_dict
from treelink.io import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    st = settings_from_dict(load_config(args.config), seed=args.seed)
    t0 = time.perf_counter()

    def progress(tag, row):
        print(f"{tag}  LA p/r {row['la_precision']:.3f}/{row['la_recall']:.3f}  "
              f"NDM p/r {row['ndm_precision']:.3f}/{row['ndm_recall']:.3f}  "
              f"{time.perf_counter() - t0:.0f} s", flush=True)

    rows = run_suite(st, args.out, threads=args.threads, progress=progress)

    with open(f"{args.out}/coverage.csv") as fh:
        cov = list(csv.DictReader(fh))
    params = list(dict.fromkeys(r["param"] for r in cov))
    print("\ncoverage (%d replicates)" % len(rows))
    print("method " + " ".join(f"{p:>7}" for p in params))
    for m in ("tl", "la", "ndm"):
        vals = {r["param"]: float(r["coverage"]) for r in cov if r["method"] == m}
        print(f"{m:<6} " + " ".join(f"{vals[p]:7.2f}" for p in params))

    print("\nlinkage   precision  recall")
    for m in ("la", "ndm"):
        p = sum(r[f"{m}_precision"] for r in rows) / len(rows)
        r_ = sum(r[f"{m}_recall"] for r in rows) / len(rows)
        print(f"{m:<9} {p:9.4f} {r_:7.4f}")


if __name__ == "__main__":
    main()
