"""Planar geometry: points, rectangular domains, rigid transforms, grid index.

Coordinates are meters. Functions that take points accept either a single
``Point2`` or an ``(n, 2)`` array and return the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import ValidationError


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Domain:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValidationError(f"degenerate domain {self}")

    @property
    def midpoint(self) -> Point2:
        return Point2((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (
            (pts[..., 0] >= self.xmin)
            & (pts[..., 0] <= self.xmax)
            & (pts[..., 1] >= self.ymin)
            & (pts[..., 1] <= self.ymax)
        )

    def clamp(self, pts) -> np.ndarray:
        pts = np.array(pts, dtype=float)
        pts[..., 0] = np.clip(pts[..., 0], self.xmin, self.xmax)
        pts[..., 1] = np.clip(pts[..., 1], self.ymin, self.ymax)
        return pts

    def distance_to_boundary(self, pts) -> np.ndarray:
        """Distance from interior points to the nearest edge (negative outside)."""
        pts = np.asarray(pts, dtype=float)
        return np.minimum.reduce(
            [
                pts[..., 0] - self.xmin,
                self.xmax - pts[..., 0],
                pts[..., 1] - self.ymin,
                self.ymax - pts[..., 1],
            ]
        )

    def sample_uniform(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = np.empty((size, 2))
        out[:, 0] = rng.uniform(self.xmin, self.xmax, size)
        out[:, 1] = rng.uniform(self.ymin, self.ymax, size)
        return out

    def as_list(self) -> list[float]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]


def expand_domain(d: Domain, margin: float) -> Domain:
    if margin < 0:
        raise ValidationError("margin must be nonnegative")
    return Domain(d.xmin - margin, d.ymin - margin, d.xmax + margin, d.ymax + margin)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RigidTransform:
    """Counterclockwise rotation by ``theta`` about ``mu`` followed by translation ``t``."""

    theta: float = 0.0
    t: Point2 = Point2(0.0, 0.0)
    mu: Point2 = Point2(0.0, 0.0)

    def __post_init__(self):
        if abs(self.theta) > math.pi:
            raise ValidationError("|theta| must not exceed pi")

    @property
    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.t[0] == 0.0 and self.t[1] == 0.0


def apply_transform(tr: RigidTransform, s):
    """R(theta) (s - mu) + t + mu."""
    arr = np.asarray(s, dtype=float)
    mx, my = tr.mu
    c, sn = math.cos(tr.theta), math.sin(tr.theta)
    dx = arr[..., 0] - mx
    dy = arr[..., 1] - my
    out = np.empty(arr.shape)
    out[..., 0] = c * dx - sn * dy + tr.t[0] + mx
    out[..., 1] = sn * dx + c * dy + tr.t[1] + my
    if arr.ndim == 1:
        return Point2(float(out[0]), float(out[1]))
    return out


def invert_transform(tr: RigidTransform, y):
    """Map observed coordinates back into latent space: R(-theta) (y - t - mu) + mu."""
    arr = np.asarray(y, dtype=float)
    mx, my = tr.mu
    c, sn = math.cos(tr.theta), math.sin(tr.theta)
    dx = arr[..., 0] - tr.t[0] - mx
    dy = arr[..., 1] - tr.t[1] - my
    out = np.empty(arr.shape)
    out[..., 0] = c * dx + sn * dy + mx
    out[..., 1] = -sn * dx + c * dy + my
    if arr.ndim == 1:
        return Point2(float(out[0]), float(out[1]))
    return out


class GridIndex:
    """Uniform grid over point identifiers ``0..n-1`` for box queries.

    Storage is compressed: ``order`` lists identifiers sorted by cell and
    ``starts[c]:starts[c+1]`` slices out cell ``c`` (row-major, ``c = iy*ncx + ix``).
    """

    def __init__(self, points, cell_size: float, extent: Domain | None = None):
        if cell_size <= 0:
            raise ValidationError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self._extent_hint = extent
        self.rebuild(points)

    def rebuild(self, points) -> None:
        pts = np.ascontiguousarray(points, dtype=float).reshape(-1, 2)
        self.points = pts.copy()
        if len(pts):
            x0, y0, x1, y1 = _kernels.bbox(pts)
            lo, hi = np.array([x0, y0]), np.array([x1, y1])
        else:
            lo = np.zeros(2)
            hi = np.zeros(2)
        if self._extent_hint is not None:
            e = self._extent_hint
            lo = np.minimum(lo, [e.xmin, e.ymin]) if len(pts) else np.array([e.xmin, e.ymin])
            hi = np.maximum(hi, [e.xmax, e.ymax]) if len(pts) else np.array([e.xmax, e.ymax])
        self.origin = lo
        cs = self.cell_size
        self.ncx = int(math.floor((hi[0] - lo[0]) / cs)) + 1
        self.ncy = int(math.floor((hi[1] - lo[1]) / cs)) + 1
        self.extent = Domain(lo[0], lo[1], lo[0] + self.ncx * cs, lo[1] + self.ncy * cs)
        self.starts, self.order = _kernels.grid_build(pts, cs, lo[0], lo[1], self.ncx, self.ncy)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def cells(self) -> dict[tuple[int, int], list[int]]:
        out = {}
        for c in np.flatnonzero(np.diff(self.starts)):
            ids = self.order[self.starts[c] : self.starts[c + 1]]
            out[(int(c % self.ncx), int(c // self.ncx))] = sorted(int(i) for i in ids)
        return out

    def cell_range(self, lo: float, hi: float, axis: int) -> tuple[int, int]:
        n = self.ncx if axis == 0 else self.ncy
        a = int(math.floor((lo - self.origin[axis]) / self.cell_size))
        b = int(math.floor((hi - self.origin[axis]) / self.cell_size))
        return max(a, 0), min(b, n - 1)

    def query_box(self, center, half_width: float) -> list[int]:
        """Identifiers of points within the closed square box, ascending."""
        if half_width <= 0:
            raise ValidationError("half_width must be positive")
        if len(self.points) == 0:
            return []
        cx, cy = float(center[0]), float(center[1])
        x0, x1 = self.cell_range(cx - half_width, cx + half_width, 0)
        y0, y1 = self.cell_range(cy - half_width, cy + half_width, 1)
        if x0 > x1 or y0 > y1:
            return []
        chunks = []
        for iy in range(y0, y1 + 1):
            row = iy * self.ncx
            chunks.append(self.order[self.starts[row + x0] : self.starts[row + x1 + 1]])
        ids = np.concatenate(chunks)
        p = self.points[ids]
        keep = (np.abs(p[:, 0] - cx) <= half_width) & (np.abs(p[:, 1] - cy) <= half_width)
        return sorted(int(i) for i in ids[keep])
