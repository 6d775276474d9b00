"""Record CSVs, dataset directories, versioned JSON configs and run archives.

A run archive is a directory holding ``manifest.json`` (array names, dtypes,
shapes, digests), ``archive.json`` (config, seed, summaries, diagnostics) and
one raw little-endian ``.bin`` file per array. Writing is byte-deterministic.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, ValidationError
from .linkage import LinkagePosterior, RecordFile
from .raster import read_ascii_grid, write_ascii_grid
from .spatial import Domain

SCHEMA_VERSION = 1
RECORD_COLUMNS = ("file_index", "record_id", "x", "y", "volume", "year")
TRUTH_COLUMNS = ("file_index", "record_id", "latent_id")


# ---------------------------------------------------------------- records


def ingest_records(path) -> tuple[RecordFile, RecordFile]:
    """Read both files from one CSV. Row numbers in errors are file line numbers."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        missing = [c for c in RECORD_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        col = {c: header.index(c) for c in RECORD_COLUMNS}
        rows: dict[int, list] = {}
        years: dict[int, int] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}", row=line)
            try:
                fi = int(row[col["file_index"]])
                rid = int(row[col["record_id"]])
                x = float(row[col["x"]])
                y = float(row[col["y"]])
                v = float(row[col["volume"]])
                yr = int(row[col["year"]])
            except ValueError as exc:
                raise ParseError(f"{path}: row {line}: {exc}", row=line) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValidationError(f"{path}: row {line}: non-finite coordinate", row=line)
            if not v > 0:
                raise ValidationError(f"{path}: row {line}: volume must be positive, got {v}", row=line)
            if years.setdefault(fi, yr) != yr:
                raise ValidationError(f"{path}: row {line}: file {fi} mixes survey years", row=line)
            rows.setdefault(fi, []).append((rid, x, y, v, line))
    if sorted(rows) != [1, 2]:
        raise ValidationError(f"{path}: expected file_index values 1 and 2, found {sorted(rows)}")
    files = []
    for fi in (1, 2):
        recs = rows[fi]
        ids = [r[0] for r in recs]
        if len(set(ids)) != len(ids):
            seen = set()
            for r in recs:
                if r[0] in seen:
                    raise ValidationError(f"{path}: row {r[4]}: duplicate record_id {r[0]} in file {fi}", row=r[4])
                seen.add(r[0])
        files.append(RecordFile(fi, years[fi], [(r[1], r[2]) for r in recs], [r[3] for r in recs], ids))
    return files[0], files[1]


def write_records(path, files) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for f in files:
            for rid, (x, y), v in zip(f.record_ids, f.locations, f.volumes):
                w.writerow([f.file_index, int(rid), repr(float(x)), repr(float(y)), repr(float(v)), f.year])


def write_truth(path, files, latent_of) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for f, lat in zip(files, latent_of):
            for rid, j in zip(f.record_ids, lat):
                w.writerow([f.file_index, int(rid), int(j)])


def read_truth(path, files) -> np.ndarray:
    """Latent labels aligned with records stacked as (file 1, file 2)."""
    table = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in TRUTH_COLUMNS):
            raise SchemaError(f"{path}: truth file needs columns {TRUTH_COLUMNS}")
        for line, row in enumerate(reader, start=2):
            try:
                table[(int(row["file_index"]), int(row["record_id"]))] = int(row["latent_id"])
            except ValueError as exc:
                raise ParseError(f"{path}: row {line}: {exc}", row=line) from None
    try:
        return np.array([table[(f.file_index, int(r))] for f in files for r in f.record_ids], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"{path}: no truth entry for record {exc.args[0]}") from None


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    files: tuple
    domain: Domain
    rasters: list
    truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def write_dataset(out, files, domain: Domain, rasters, latent_of=None, meta=None) -> Path:
    out = Path(out)
    (out / "rasters").mkdir(parents=True, exist_ok=True)
    write_records(out / "records.csv", files)
    names = []
    for r in rasters:
        write_ascii_grid(r, out / "rasters" / f"{r.name}.asc")
        names.append(r.name)
    if latent_of is not None:
        write_truth(out / "truth.csv", files, latent_of)
    info = {"schema_version": SCHEMA_VERSION, "domain": domain.as_list(), "rasters": names,
            "meta": meta or {}}
    write_json(out / "dataset.json", info)
    return out


def read_dataset(path, domain: Domain | None = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such dataset")
    if path.is_file():
        files = ingest_records(path)
        if domain is None:
            raise ValidationError("a bare records file needs an analysis domain in the config")
        return Dataset(files, domain, [])
    files = ingest_records(path / "records.csv")
    info = read_json(path / "dataset.json") if (path / "dataset.json").exists() else {}
    if domain is None:
        if "domain" not in info:
            raise ValidationError(f"{path}: no analysis domain given")
        domain = Domain(*info["domain"])
    rasters = [read_ascii_grid(path / "rasters" / f"{n}.asc", name=n) for n in info.get("rasters", [])]
    truth = read_truth(path / "truth.csv", files) if (path / "truth.csv").exists() else None
    return Dataset(files, domain, rasters, truth, info.get("meta", {}))


# ---------------------------------------------------------------- json


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None


def load_config(path) -> dict:
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    return cfg


# ---------------------------------------------------------------- run archives


@dataclass
class RunArchive:
    kind: str
    config: dict
    seed: int
    arrays: dict = field(default_factory=dict)
    summaries: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    timings: dict | None = None

    def write(self, out) -> Path:
        out = Path(out)
        (out / "arrays").mkdir(parents=True, exist_ok=True)
        entries = []
        for name in sorted(self.arrays):
            arr = np.asarray(self.arrays[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            blob = np.ascontiguousarray(arr).tobytes()
            (out / "arrays" / f"{name}.bin").write_bytes(blob)
            entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                            "sha256": hashlib.sha256(blob).hexdigest()})
        body = {"kind": self.kind, "config": self.config, "seed": self.seed,
                "summaries": self.summaries, "diagnostics": self.diagnostics}
        if self.timings is not None:
            body["timings"] = self.timings
        write_json(out / "archive.json", body)
        write_json(out / "manifest.json", {"schema_version": SCHEMA_VERSION, "kind": self.kind,
                                           "arrays": entries})
        return out

    @classmethod
    def read(cls, path) -> "RunArchive":
        path = Path(path)
        manifest = read_json(path / "manifest.json")
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{path}: unsupported archive schema")
        body = read_json(path / "archive.json")
        arrays = {}
        for e in manifest["arrays"]:
            blob = (path / "arrays" / f"{e['name']}.bin").read_bytes()
            if hashlib.sha256(blob).hexdigest() != e["sha256"]:
                raise ValidationError(f"{path}: digest mismatch for array {e['name']}")
            arrays[e["name"]] = np.frombuffer(blob, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        return cls(body["kind"], body["config"], body["seed"], arrays, body.get("summaries", {}),
                   body.get("diagnostics", {}), body.get("timings"))


def archive_bytes(path) -> dict[str, bytes]:
    """All files of an archive keyed by relative path (for equality checks)."""
    path = Path(path)
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def linkage_archive(post: LinkagePosterior, config: dict, timings: bool = False) -> RunArchive:
    arrays = {
        "lam_draws": post.lam_draws, "s_draws": post.s_draws, "draw_iterations": post.draw_iterations,
        "sigma2_trace": post.sigma2_trace, "theta_trace": post.theta_trace, "t_trace": post.t_trace,
        "record_keys": np.asarray(post.keys, dtype=np.int64).reshape(-1, 2),
    }
    return RunArchive(
        kind="linkage", config=config, seed=post.seed, arrays=arrays,
        summaries={"n_draws": post.n_draws, "burnin": post.burnin, "thin": post.thin,
                   "sigma2_mean": float(np.mean(post.sigma2_trace[post.burnin:]))
                   if len(post.sigma2_trace) > post.burnin else None},
        diagnostics=post.diagnostics,
        timings={"seconds_per_iteration": post.seconds_per_iteration} if timings else None,
    )


def linkage_from_archive(arch: RunArchive) -> LinkagePosterior:
    if arch.kind != "linkage":
        raise ValidationError(f"expected a linkage archive, got kind {arch.kind!r}")
    a = arch.arrays
    return LinkagePosterior(
        lam_draws=a["lam_draws"], s_draws=a["s_draws"], draw_iterations=a["draw_iterations"],
        sigma2_trace=a["sigma2_trace"], theta_trace=a["theta_trace"], t_trace=a["t_trace"],
        burnin=int(arch.summaries.get("burnin", 0)), thin=int(arch.summaries.get("thin", 1)),
        seed=int(arch.seed), keys=[tuple(map(int, k)) for k in a["record_keys"]],
        diagnostics=dict(arch.diagnostics),
        seconds_per_iteration=(arch.timings or {}).get("seconds_per_iteration"),
    )
