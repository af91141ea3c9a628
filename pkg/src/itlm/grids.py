"""Regular lat/lon grids, masked rasters, cropping, resampling, and RGRD I/O.

Conventions: row 0 is the northern edge, column 0 the western edge; pixel
(i, j) is centered at (lat0 - (i + 0.5) * dlat, lon0 + (j + 0.5) * dlon).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

RGRD_MAGIC = b"RGRD"
RGRD_VERSION = 1


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GeoGrid:
    """North-west anchored regular lat/lon grid."""

    lat0: float  # north edge, degrees
    lon0: float  # west edge, degrees
    dlat: float  # degrees per pixel, > 0
    dlon: float  # degrees per pixel, > 0
    nrows: int
    ncols: int

    def __post_init__(self):
        for name in ("lat0", "lon0", "dlat", "dlon"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("nrows", "ncols"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.dlat <= 0 or self.dlon <= 0:
            raise GridError("grid resolution must be positive")
        if self.nrows < 1 or self.ncols < 1:
            raise GridError("grid dimensions must be at least 1x1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    def lat_centers(self) -> np.ndarray:
        return self.lat0 - (np.arange(self.nrows) + 0.5) * self.dlat

    def lon_centers(self) -> np.ndarray:
        return self.lon0 + (np.arange(self.ncols) + 0.5) * self.dlon

    def center_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(lat, lon) 2-D arrays of pixel centers."""
        return np.meshgrid(self.lat_centers(), self.lon_centers(), indexing="ij")

    def to_dict(self) -> dict:
        return {
            "lat0": self.lat0,
            "lon0": self.lon0,
            "dlat": self.dlat,
            "dlon": self.dlon,
            "nrows": self.nrows,
            "ncols": self.ncols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoGrid":
        return cls(
            lat0=float(d["lat0"]),
            lon0=float(d["lon0"]),
            dlat=float(d["dlat"]),
            dlon=float(d["dlon"]),
            nrows=int(d["nrows"]),
            ncols=int(d["ncols"]),
        )


def make_grid(
    lat_north: float,
    lon_west: float,
    dlat: float,
    dlon: float,
    nrows: int,
    ncols: int,
) -> GeoGrid:
    return GeoGrid(lat_north, lon_west, dlat, dlon, nrows, ncols)


@dataclass
class Raster:
    """One 2-D field plus validity mask on a GeoGrid."""

    grid: GeoGrid
    values: np.ndarray  # float64, shape (nrows, ncols)
    valid: np.ndarray  # bool, same shape

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.grid.shape or self.valid.shape != self.grid.shape:
            raise GridError(
                f"raster shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values[self.valid])):
            raise GridError("raster contains non-finite values marked valid")

    @classmethod
    def full(cls, grid: GeoGrid, values: np.ndarray, valid=None) -> "Raster":
        values = np.asarray(values, dtype=np.float64)
        if np.isscalar(valid) or valid is None:
            mask = np.full(grid.shape, True if valid is None else bool(valid))
        else:
            mask = np.asarray(valid, dtype=bool)
        return cls(grid, values, mask)

    @classmethod
    def invalid(cls, grid: GeoGrid) -> "Raster":
        return cls(grid, np.zeros(grid.shape), np.zeros(grid.shape, dtype=bool))

    def copy(self) -> "Raster":
        return Raster(self.grid, self.values.copy(), self.valid.copy())


def crop(r: Raster, lat_min: float, lat_max: float, lon_min: float, lon_max: float) -> Raster:
    """Sub-raster of pixels whose centers fall inside the bbox."""
    lats = r.grid.lat_centers()
    lons = r.grid.lon_centers()
    rows = np.nonzero((lats >= lat_min) & (lats <= lat_max))[0]
    cols = np.nonzero((lons >= lon_min) & (lons <= lon_max))[0]
    if rows.size == 0 or cols.size == 0:
        raise GridError("crop bbox does not intersect the grid")
    i0, i1 = rows[0], rows[-1] + 1
    j0, j1 = cols[0], cols[-1] + 1
    sub = GeoGrid(
        lat0=r.grid.lat0 - i0 * r.grid.dlat,
        lon0=r.grid.lon0 + j0 * r.grid.dlon,
        dlat=r.grid.dlat,
        dlon=r.grid.dlon,
        nrows=i1 - i0,
        ncols=j1 - j0,
    )
    return Raster(sub, r.values[i0:i1, j0:j1].copy(), r.valid[i0:i1, j0:j1].copy())


def _nearest_indices(src: GeoGrid, dst: GeoGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/col of the nearest src center per dst pixel, plus in-range flag.

    Uses the equirectangular metric; on a regular grid the nearest center
    along each axis is independent, so a rounded index is exact.
    """
    dst_lat = dst.lat_centers()
    dst_lon = dst.lon_centers()
    fi = (src.lat0 - dst_lat) / src.dlat - 0.5
    fj = (dst_lon - src.lon0) / src.dlon - 0.5
    ri = np.clip(np.rint(fi).astype(int), 0, src.nrows - 1)
    rj = np.clip(np.rint(fj).astype(int), 0, src.ncols - 1)
    src_lat = src.lat0 - (ri + 0.5) * src.dlat
    src_lon = src.lon0 + (rj + 0.5) * src.dlon
    cutoff = 2.0 * max(src.dlat, src.dlon)
    near_i = np.abs(src_lat - dst_lat)[:, None]
    near_j = np.abs(src_lon - dst_lon)[None, :]
    dist = np.hypot(near_i, near_j)
    return ri, rj, dist <= cutoff


def resample_nearest(src: Raster, dst: GeoGrid) -> Raster:
    """Nearest-center resampling with a 2*max(dlat,dlon) distance cutoff."""
    ri, rj, in_range = _nearest_indices(src.grid, dst)
    values = src.values[np.ix_(ri, rj)]
    valid = src.valid[np.ix_(ri, rj)] & in_range
    values = np.where(valid, values, 0.0)
    return Raster(dst, values, valid)


def resample_bilinear(src: Raster, dst: GeoGrid) -> Raster:
    """Bilinear interpolation of the 4 surrounding src centers.

    Invalid where any corner is invalid or the dst center is outside the
    convex hull of src centers.
    """
    if src.grid.nrows < 2 or src.grid.ncols < 2:
        raise GridError("bilinear resampling needs a source grid of at least 2x2")
    g = src.grid
    fi = (g.lat0 - dst.lat_centers()) / g.dlat - 0.5  # fractional row
    fj = (dst.lon_centers() - g.lon0) / g.dlon - 0.5  # fractional col
    inside = ((fi >= 0) & (fi <= g.nrows - 1))[:, None] & (
        (fj >= 0) & (fj <= g.ncols - 1)
    )[None, :]
    i0 = np.clip(np.floor(fi).astype(int), 0, g.nrows - 2)
    j0 = np.clip(np.floor(fj).astype(int), 0, g.ncols - 2)
    wi = (fi - i0)[:, None]
    wj = (fj - j0)[None, :]
    i0m, j0m = np.meshgrid(i0, j0, indexing="ij")
    v00 = src.values[i0m, j0m]
    v01 = src.values[i0m, j0m + 1]
    v10 = src.values[i0m + 1, j0m]
    v11 = src.values[i0m + 1, j0m + 1]
    values = (
        v00 * (1 - wi) * (1 - wj)
        + v01 * (1 - wi) * wj
        + v10 * wi * (1 - wj)
        + v11 * wi * wj
    )
    valid = (
        inside
        & src.valid[i0m, j0m]
        & src.valid[i0m, j0m + 1]
        & src.valid[i0m + 1, j0m]
        & src.valid[i0m + 1, j0m + 1]
    )
    values = np.where(valid, values, 0.0)
    return Raster(dst, values, valid)


def write_rgrd(r: Raster, path) -> None:
    """RGRD container: magic, u32 version, u64 header length, JSON header,
    row-major f64 values, row-major u8 mask. All little-endian."""
    header = dict(r.grid.to_dict(), dtype="f64", mask="u8")
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(RGRD_MAGIC)
        f.write(struct.pack("<I", RGRD_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(np.ascontiguousarray(r.values, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(r.valid, dtype=np.uint8).tobytes())


def read_rgrd(path) -> Raster:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RGRD_MAGIC:
            raise GridError(f"bad RGRD magic in {path!s}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != RGRD_VERSION:
            raise GridError(f"unsupported RGRD version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        grid = GeoGrid.from_dict(header)
        n = grid.nrows * grid.ncols
        values = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(grid.shape)
        valid = np.frombuffer(f.read(n), dtype=np.uint8).reshape(grid.shape).astype(bool)
    return Raster(grid, values.copy(), valid)
