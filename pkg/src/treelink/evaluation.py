"""Link precision/recall over coreference pairs, interval coverage, timing tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def pairs_from_labels(labels) -> np.ndarray:
    """Sorted int64 keys ``a*n + b`` (a < b) of record pairs sharing a label."""
    labels = np.asarray(labels)
    n = len(labels)
    order = np.argsort(labels, kind="stable")
    sl = labels[order]
    cuts = np.flatnonzero(np.diff(sl)) + 1
    keys = []
    for grp in np.split(order, cuts):
        m = len(grp)
        if m < 2:
            continue
        g = np.sort(grp).astype(np.int64)
        a, b = np.triu_indices(m, 1)
        keys.append(g[a] * n + g[b])
    if not keys:
        return np.empty(0, np.int64)
    return np.unique(np.concatenate(keys))


def pairs_to_keys(pairs, n: int) -> np.ndarray:
    """Keys for an explicit collection of unordered (a, b) index pairs."""
    p = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    p = p[p[:, 0] != p[:, 1]]
    lo, hi = np.minimum(p[:, 0], p[:, 1]), np.maximum(p[:, 0], p[:, 1])
    return np.unique(lo * n + hi)


@dataclass
class LinkEvalResult:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    per_draw: dict = field(default_factory=dict)


def _scores(tp: int, fp: int, fn: int) -> tuple[float, float]:
    # no predicted pairs means no false positives: precision 1 by convention
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def eval_links(predicted, truth) -> LinkEvalResult:
    """Compare predicted and true pairs.

    Both sides are either 1-d key arrays (see ``pairs_from_labels``) or
    collections of unordered 2-tuples of hashable record identifiers.
    """
    pk, tk = _is_keys(predicted), _is_keys(truth)
    if pk and tk:
        p, t = np.unique(np.asarray(predicted, np.int64)), np.unique(np.asarray(truth, np.int64))
        tp = int(len(np.intersect1d(p, t, assume_unique=True)))
        n_pred, n_true = len(p), len(t)
    elif not pk and not tk:
        p, t = _pair_set(predicted), _pair_set(truth)
        tp, n_pred, n_true = len(p & t), len(p), len(t)
    else:
        raise ValidationError("cannot mix key arrays with explicit pairs")
    fp, fn = n_pred - tp, n_true - tp
    prec, rec = _scores(tp, fp, fn)
    return LinkEvalResult(tp, fp, fn, prec, rec)


def _is_keys(x) -> bool:
    return isinstance(x, np.ndarray) and x.ndim == 1


def _pair_set(x) -> set:
    out = set()
    for pair in x:
        a, b = (tuple(p) if isinstance(p, (list, np.ndarray)) else p for p in pair)
        if a != b:
            out.add(frozenset((a, b)))
    return out


def eval_posterior_links(lam_draws, truth_labels) -> LinkEvalResult:
    """Per-draw precision/recall; the headline numbers are the per-draw means."""
    tk = pairs_from_labels(truth_labels)
    prec, rec, tps, fps = [], [], [], []
    for lam in lam_draws:
        res = eval_links(pairs_from_labels(lam), tk)
        prec.append(res.precision)
        rec.append(res.recall)
        tps.append(res.tp)
        fps.append(res.fp)
    prec, rec = np.array(prec), np.array(rec)
    tp = float(np.mean(tps))
    fp = float(np.mean(fps))
    fn = float(len(tk) - tp)
    out = LinkEvalResult(round(tp), round(fp), round(fn), float(prec.mean()), float(rec.mean()))
    out.per_draw = {
        "precision": prec,
        "recall": rec,
        "precision_quartiles": np.quantile(prec, [0.25, 0.5, 0.75]).tolist(),
        "recall_quartiles": np.quantile(rec, [0.25, 0.5, 0.75]).tolist(),
    }
    return out


@dataclass
class CoverageResult:
    truth: dict[str, float]
    intervals: dict[str, int]
    hits: dict[str, int]

    @property
    def coverage(self) -> dict[str, float]:
        return {k: self.hits[k] / self.intervals[k] for k in self.intervals if self.intervals[k]}


def eval_coverage(interval_sets, truth: dict[str, float]) -> CoverageResult:
    """``interval_sets`` holds one ``{name: (lo, hi)}`` mapping per replicate."""
    counts = {k: 0 for k in truth}
    hits = {k: 0 for k in truth}
    for ints in interval_sets:
        for k, v in truth.items():
            if k not in ints or ints[k] is None:
                continue
            lo, hi = ints[k]
            counts[k] += 1
            hits[k] += int(lo <= v <= hi)
    return CoverageResult(dict(truth), counts, hits)


def timing_report(rows) -> list[dict]:
    """Mean seconds per iteration per (n, box) with speedups against the unrestricted box.

    ``rows`` are mappings with keys ``n``, ``box`` (None for unrestricted) and
    ``seconds_per_iteration``.
    """
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((int(r["n"]), r["box"]), []).append(float(r["seconds_per_iteration"]))
    base = {n: float(np.mean(v)) for (n, b), v in groups.items() if b is None}

    def sort_key(key):
        n, b = key
        return (n, float("inf") if b is None else float(b))

    out = []
    for key in sorted(groups, key=sort_key):
        n, b = key
        mean = float(np.mean(groups[key]))
        ref = base.get(n)
        if ref is None and len(groups) == 1:
            ref = mean
        out.append({"n": n, "box": b, "seconds_per_iteration": mean,
                    "speedup": (ref / mean) if ref is not None else None})
    return out
