"""Covariate rasters in the plain-text grid format (6-line header, row-major values).

Row 0 of ``values`` is the northern edge, matching the file layout. Cells are
half-open: a point on a shared edge belongs to the cell to its east/north.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CovariateUnavailable, DegenerateCovariate, ParseError, SchemaError
from .spatial import Domain

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass
class Raster:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    values: np.ndarray
    nodata: float = -9999.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.nrows, self.ncols)
        if not self.cellsize > 0:
            raise SchemaError("cellsize must be positive")

    @property
    def extent(self) -> Domain:
        return Domain(self.xll, self.yll, self.xll + self.ncols * self.cellsize,
                      self.yll + self.nrows * self.cellsize)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values) & (self.values != self.nodata)

    def cell_index(self, pts):
        """(row, col) arrays for points; -1 where outside the extent."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        col = np.floor((pts[:, 0] - self.xll) / self.cellsize).astype(np.int64)
        up = np.floor((pts[:, 1] - self.yll) / self.cellsize).astype(np.int64)
        row = self.nrows - 1 - up
        inside = (col >= 0) & (col < self.ncols) & (up >= 0) & (up < self.nrows)
        return np.where(inside, row, -1), np.where(inside, col, -1)

    def cell_centers(self):
        xs = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        ys = self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize
        return np.meshgrid(xs, ys)


def sample_raster(r: Raster, p) -> float:
    """Value of the cell containing ``p``."""
    row, col = r.cell_index(p)
    if row[0] < 0:
        raise CovariateUnavailable(f"point {tuple(p)} outside raster {r.name!r}", location=tuple(p))
    v = r.values[row[0], col[0]]
    if v == r.nodata or not math.isfinite(v):
        raise CovariateUnavailable(f"no-data cell at {tuple(p)} in raster {r.name!r}", location=tuple(p))
    return float(v)


def sample_raster_many(r: Raster, pts) -> np.ndarray:
    """Vectorized lookup; unavailable locations come back as NaN."""
    row, col = r.cell_index(pts)
    out = np.full(len(row), np.nan)
    ok = row >= 0
    vals = r.values[row[ok], col[ok]]
    vals = np.where(vals == r.nodata, np.nan, vals)
    out[ok] = vals
    return out


def cells_in_domain(r: Raster, domain: Domain) -> np.ndarray:
    """Mask of cells whose footprint overlaps the interior of ``domain``."""
    x0 = r.xll + np.arange(r.ncols) * r.cellsize
    y_top = r.yll + (r.nrows - np.arange(r.nrows)) * r.cellsize
    cols = (x0 + r.cellsize > domain.xmin) & (x0 < domain.xmax)
    rows = (y_top > domain.ymin) & (y_top - r.cellsize < domain.ymax)
    return rows[:, None] & cols[None, :]


def standardize_covariates(rasters, domain: Domain):
    """Center and scale each raster by its mean and (n-1) SD over cells touching ``domain``.

    Returns ``(standardized_rasters, [(mean, sd), ...])``.
    """
    out, stats = [], []
    for r in rasters:
        mask = cells_in_domain(r, domain) & r.valid
        vals = r.values[mask]
        if len(vals) < 2:
            raise DegenerateCovariate(f"raster {r.name!r} has fewer than two valid cells in the domain")
        mean = float(vals.mean())
        sd = float(vals.std(ddof=1))
        if not sd > 0:
            raise DegenerateCovariate(f"raster {r.name!r} is constant over the domain")
        new = np.where(r.valid, (r.values - mean) / sd, r.nodata)
        out.append(replace(r, values=new))
        stats.append((mean, sd))
    return out, stats


def read_ascii_grid(path, name: str | None = None) -> Raster:
    path = Path(path)
    lines = path.read_text().splitlines()
    if len(lines) < 6:
        raise ParseError(f"{path}: truncated header")
    header = {}
    for i in range(6):
        parts = lines[i].split()
        if len(parts) != 2:
            raise ParseError(f"{path}: malformed header line {i + 1}")
        header[parts[0].lower()] = parts[1]
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise SchemaError(f"{path}: missing header keys {missing}")
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        vals = np.array(" ".join(lines[6:]).split(), dtype=float)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if vals.size != ncols * nrows:
        raise ParseError(f"{path}: expected {ncols * nrows} values, found {vals.size}")
    return Raster(ncols, nrows, float(header["xllcorner"]), float(header["yllcorner"]),
                  float(header["cellsize"]), vals.reshape(nrows, ncols),
                  float(header["nodata_value"]), name=name or path.stem)


def write_ascii_grid(r: Raster, path) -> None:
    rows = [
        f"ncols {r.ncols}",
        f"nrows {r.nrows}",
        f"xllcorner {r.xll!r}",
        f"yllcorner {r.yll!r}",
        f"cellsize {r.cellsize!r}",
        f"NODATA_value {r.nodata!r}",
    ]
    rows += [" ".join(repr(float(v)) for v in row) for row in r.values]
    Path(path).write_text("\n".join(rows) + "\n")
