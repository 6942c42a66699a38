"""Web-Mercator tile addressing, projection and polygon rasterization.

All coordinates are float64. Tiles use slippy-map z/x/y addressing with
half-open bounds ``[west, east) x [south, north)``; pixel rows grow
southward.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# atan(sinh(pi)) in degrees
MAX_LAT = math.degrees(math.atan(math.sinh(math.pi)))


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")
        _check_lat(self.lat)


@dataclass(frozen=True)
class TileSpec:
    z: int
    x: int
    y: int
    px: int = 512
    py: int = 512

    def __post_init__(self):
        if self.z < 0:
            raise ValueError("zoom must be nonnegative")
        n = 1 << self.z
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise ValueError(f"tile index ({self.x}, {self.y}) outside [0, {n}) at z={self.z}")
        if self.px <= 0 or self.py <= 0:
            raise ValueError("tile pixel dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.py, self.px)


@dataclass(frozen=True)
class TileBounds:
    west: float
    south: float
    east: float
    north: float

    def contains(self, lon: float, lat: float) -> bool:
        return self.west <= lon < self.east and self.south <= lat < self.north


def _as_ring(points) -> np.ndarray:
    ring = np.asarray(points, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise ValueError("ring must be a sequence of (lon, lat) pairs")
    if len(ring) < 4:
        raise ValueError("ring needs at least 4 points (closed)")
    if not np.array_equal(ring[0], ring[-1]):
        raise ValueError("ring is not closed (first point != last point)")
    if not np.all(np.isfinite(ring)):
        raise ValueError("ring has non-finite coordinates")
    if np.any(np.abs(ring[:, 0]) > 180.0):
        raise ValueError("ring longitude outside [-180, 180]")
    if np.any(np.abs(ring[:, 1]) > MAX_LAT):
        raise ValueError("ring latitude beyond the Web-Mercator limit")
    return ring


@dataclass(frozen=True)
class PolygonGeometry:
    """Polygon with one exterior ring and optional holes, as (lon, lat) arrays."""

    exterior: np.ndarray
    holes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "exterior", _as_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in self.holes))

    @property
    def rings(self) -> list[np.ndarray]:
        return [self.exterior, *self.holes]

    def bbox(self) -> tuple[float, float, float, float]:
        lon, lat = self.exterior[:, 0], self.exterior[:, 1]
        return float(lon.min()), float(lat.min()), float(lon.max()), float(lat.max())


def _check_lat(lat):
    lat = np.asarray(lat, dtype=np.float64)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) > MAX_LAT):
        raise ValueError(f"latitude beyond the Web-Mercator limit (|lat| <= {MAX_LAT:.7f})")


def mercator_fraction(lon, lat):
    """Fractional Web-Mercator coordinates in [0, 1) x [0, 1), y growing south."""
    _check_lat(lat)
    lon = np.asarray(lon, dtype=np.float64)
    phi = np.radians(np.asarray(lat, dtype=np.float64))
    fx = (lon + 180.0) / 360.0
    fy = (1.0 - np.log(np.tan(phi) + 1.0 / np.cos(phi)) / math.pi) / 2.0
    return fx, fy


def _lat_from_fraction(fy):
    return np.degrees(np.arctan(np.sinh(math.pi * (1.0 - 2.0 * np.asarray(fy, dtype=np.float64)))))


def lonlat_to_tile(p: GeoPoint, z: int) -> tuple[int, int]:
    n = 1 << z
    fx, fy = mercator_fraction(p.lon, p.lat)
    x = min(int(math.floor(float(fx) * n)), n - 1)
    y = min(max(int(math.floor(float(fy) * n)), 0), n - 1)
    return x, y


def tile_bounds(t: TileSpec) -> TileBounds:
    n = 1 << t.z
    west = t.x / n * 360.0 - 180.0
    east = (t.x + 1) / n * 360.0 - 180.0
    north = float(_lat_from_fraction(t.y / n))
    south = float(_lat_from_fraction((t.y + 1) / n))
    return TileBounds(west=west, south=south, east=east, north=north)


def project_to_pixel(lon, lat, t: TileSpec):
    """Map lon/lat (scalars or arrays) to real pixel coordinates (u, v) in tile ``t``.

    Points outside the tile are allowed and land outside ``[0, px) x [0, py)``.
    """
    n = 1 << t.z
    fx, fy = mercator_fraction(lon, lat)
    u = (fx * n - t.x) * t.px
    v = (fy * n - t.y) * t.py
    if np.ndim(u) == 0:
        return float(u), float(v)
    return u, v


def pixel_to_lonlat(u, v, t: TileSpec):
    """Inverse of :func:`project_to_pixel`."""
    n = 1 << t.z
    fx = (t.x + np.asarray(u, dtype=np.float64) / t.px) / n
    fy = (t.y + np.asarray(v, dtype=np.float64) / t.py) / n
    lon = fx * 360.0 - 180.0
    lat = _lat_from_fraction(fy)
    if np.ndim(lon) == 0:
        return float(lon), float(lat)
    return lon, lat


def shoelace_area(xy: np.ndarray) -> float:
    """Unsigned area of a closed ring given as an (N, 2) array."""
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * abs(float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1])))


def _projected_rings(g: PolygonGeometry, t: TileSpec) -> list[np.ndarray]:
    out = []
    for ring in g.rings:
        u, v = project_to_pixel(ring[:, 0], ring[:, 1], t)
        out.append(np.column_stack([u, v]))
    return out


def rasterize_rings(rings: Sequence[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline fill of pixel-space rings sampled at pixel centers."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    x0 = np.concatenate([r[:-1, 0] for r in rings])
    y0 = np.concatenate([r[:-1, 1] for r in rings])
    x1 = np.concatenate([r[1:, 0] for r in rings])
    y1 = np.concatenate([r[1:, 1] for r in rings])
    keep = y0 != y1
    x0, y0, x1, y1 = x0[keep], y0[keep], x1[keep], y1[keep]
    if x0.size == 0:
        return mask
    ylo = np.minimum(y0, y1)
    yhi = np.maximum(y0, y1)
    r_start = max(int(math.ceil(ylo.min() - 0.5)), 0)
    r_stop = min(int(math.ceil(yhi.max() - 0.5)), h)
    slope = (x1 - x0) / (y1 - y0)
    for r in range(r_start, r_stop):
        yc = r + 0.5
        hit = (ylo <= yc) & (yc < yhi)
        if not hit.any():
            continue
        xs = np.sort(x0[hit] + (yc - y0[hit]) * slope[hit])
        starts = np.ceil(xs[0::2] - 0.5).astype(np.int64)
        stops = np.ceil(xs[1::2] - 0.5).astype(np.int64)
        for a, b in zip(np.clip(starts, 0, w), np.clip(stops, 0, w)):
            if b > a:
                mask[r, a:b] = True
    return mask


def rasterize_polygon(g: PolygonGeometry, t: TileSpec) -> np.ndarray:
    """Boolean (py, px) mask of pixels whose centers fall inside ``g`` (even-odd rule)."""
    rings = _projected_rings(g, t)
    if shoelace_area(rings[0]) == 0.0:
        warnings.warn("degenerate polygon ring with zero projected area", RuntimeWarning, stacklevel=2)
        return np.zeros(t.shape, dtype=bool)
    return rasterize_rings(rings, t.shape)


def clip_ring_to_rect(xy: np.ndarray, width: float, height: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a closed ring to ``[0, width] x [0, height]``."""
    pts = [tuple(p) for p in xy[:-1]]
    edges = [
        (lambda p: p[0] >= 0.0, 0, 0.0),
        (lambda p: p[0] <= width, 0, width),
        (lambda p: p[1] >= 0.0, 1, 0.0),
        (lambda p: p[1] <= height, 1, height),
    ]
    for inside, axis, bound in edges:
        if not pts:
            break
        out = []
        prev = pts[-1]
        for cur in pts:
            cin, pin = inside(cur), inside(prev)
            if cin != pin:
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if cin:
                out.append(cur)
            prev = cur
        pts = out
    if not pts:
        return np.zeros((0, 2))
    pts.append(pts[0])
    return np.asarray(pts, dtype=np.float64)


def polygon_intersects_tile(g: PolygonGeometry, t: TileSpec) -> bool:
    """True when the exterior ring overlaps the tile with positive area."""
    u, v = project_to_pixel(g.exterior[:, 0], g.exterior[:, 1], t)
    if u.max() <= 0 or v.max() <= 0 or u.min() >= t.px or v.min() >= t.py:
        return False
    clipped = clip_ring_to_rect(np.column_stack([u, v]), t.px, t.py)
    return len(clipped) >= 4 and shoelace_area(clipped) > 0.0


def tiles_for_polygon(g: PolygonGeometry, z: int, px: int = 512, py: int = 512) -> list[TileSpec]:
    """Tiles at zoom ``z`` whose area the polygon's exterior overlaps, in (y, x) order."""
    west, south, east, north = g.bbox()
    n = 1 << z
    fx0, fy0 = mercator_fraction(west, north)
    fx1, fy1 = mercator_fraction(east, south)
    x_lo, x_hi = int(math.floor(fx0 * n)), min(int(math.floor(fx1 * n)), n - 1)
    y_lo, y_hi = max(int(math.floor(fy0 * n)), 0), min(int(math.floor(fy1 * n)), n - 1)
    out = []
    for y in range(y_lo, y_hi + 1):
        for x in range(x_lo, x_hi + 1):
            t = TileSpec(z, x, y, px, py)
            if polygon_intersects_tile(g, t):
                out.append(t)
    return out


def mask_area(m: np.ndarray) -> int:
    return int(np.count_nonzero(m))
