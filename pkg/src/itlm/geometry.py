"""Viewing and solar geometry on lat/lon grids.

Geostationary view zenith, low-accuracy solar position, sun-glint angle,
and the day/night and terrain masks derived from them.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass

import numpy as np

from .grids import GeoGrid, GridError, Raster

EARTH_RADIUS_KM = 6371.0
GEO_ORBIT_RADIUS_KM = 42164.0

DAY_NIGHT_THRESHOLD_DEG = 85.0


@dataclass
class GeoAngles:
    """Satellite and solar angles, all on one grid, degrees."""

    view_zenith: Raster
    view_azimuth: Raster
    solar_zenith: Raster
    solar_azimuth: Raster

    def __post_init__(self):
        ref = self.view_zenith.grid
        for r in (self.view_azimuth, self.solar_zenith, self.solar_azimuth):
            if r.grid != ref:
                raise GridError("angle rasters must share one grid")


def view_zenith(grid: GeoGrid, subsat_lon: float) -> Raster:
    """Geostationary view zenith from the spherical slant-range triangle.

    Pixels beyond the horizon (rs*cos(beta) <= Re) are invalid.
    """
    lat, lon = grid.center_mesh()
    latr = np.radians(lat)
    dlon = np.radians(lon - subsat_lon)
    cos_beta = np.cos(latr) * np.cos(dlon)  # sub-satellite point at (0, subsat_lon)
    re, rs = EARTH_RADIUS_KM, GEO_ORBIT_RADIUS_KM
    num = rs * cos_beta - re
    valid = num > 0
    d = np.sqrt(re**2 + rs**2 - 2 * re * rs * cos_beta)
    cos_vz = np.clip(num / d, -1.0, 1.0)
    vz = np.degrees(np.arccos(cos_vz))
    return Raster(grid, np.where(valid, vz, 0.0), valid)


def view_azimuth(grid: GeoGrid, subsat_lon: float) -> Raster:
    """Azimuth from pixel toward the sub-satellite point, clockwise from north."""
    lat, lon = grid.center_mesh()
    latr = np.radians(lat)
    dlon = np.radians(subsat_lon - lon)
    # bearing toward (0, subsat_lon) on the sphere
    y = np.sin(dlon)
    x = -np.sin(latr) * np.cos(dlon)
    az = np.degrees(np.arctan2(y, x)) % 360.0
    return Raster(grid, az, np.ones(grid.shape, dtype=bool))


def _solar_angles_scalar(timestamp: float) -> tuple[float, float, float]:
    """(declination rad, equation of time in hours, UTC decimal hours)."""
    t = _dt.datetime.fromtimestamp(timestamp, tz=_dt.timezone.utc)
    if not (2000 <= t.year <= 2100):
        raise ValueError(f"timestamp year {t.year} outside supported range 2000-2100")
    doy = t.timetuple().tm_yday
    utc_hours = t.hour + t.minute / 60.0 + t.second / 3600.0
    # Spencer (1971) Fourier fits: adequate for ~1 degree mask accuracy.
    g = 2.0 * np.pi * (doy - 1 + (utc_hours - 12.0) / 24.0) / 365.0
    decl = (
        0.006918
        - 0.399912 * np.cos(g)
        + 0.070257 * np.sin(g)
        - 0.006758 * np.cos(2 * g)
        + 0.000907 * np.sin(2 * g)
        - 0.002697 * np.cos(3 * g)
        + 0.00148 * np.sin(3 * g)
    )
    eot_h = (
        229.18
        / 60.0
        * (
            0.000075
            + 0.001868 * np.cos(g)
            - 0.032077 * np.sin(g)
            - 0.014615 * np.cos(2 * g)
            - 0.040849 * np.sin(2 * g)
        )
    )
    return decl, eot_h, utc_hours


def solar_position(grid: GeoGrid, timestamp: float) -> tuple[Raster, Raster]:
    """Low-accuracy solar zenith and azimuth (degrees) at a UTC timestamp."""
    decl, eot_h, utc_hours = _solar_angles_scalar(timestamp)
    lat, lon = grid.center_mesh()
    latr = np.radians(lat)
    solar_time_h = utc_hours + lon / 15.0 + eot_h
    hour_angle = np.radians((solar_time_h - 12.0) * 15.0)
    cos_z = np.sin(latr) * np.sin(decl) + np.cos(latr) * np.cos(decl) * np.cos(hour_angle)
    cos_z = np.clip(cos_z, -1.0, 1.0)
    zen = np.degrees(np.arccos(cos_z))
    sin_z = np.sqrt(np.maximum(1.0 - cos_z**2, 1e-12))
    cos_az = (np.sin(decl) - np.sin(latr) * cos_z) / (np.cos(latr) * sin_z)
    az = np.degrees(np.arccos(np.clip(cos_az, -1.0, 1.0)))
    az = np.where(hour_angle > 0, 360.0 - az, az) % 360.0
    ok = np.ones(grid.shape, dtype=bool)
    return Raster(grid, zen, ok), Raster(grid, az, ok)


def sun_glint_angle(angles: GeoAngles) -> Raster:
    """Angle between the view direction and the specular solar reflection.

    cos(SGA) = cos(vz)*cos(sz) - sin(vz)*sin(sz)*cos(va - sa), in [0, 180].
    """
    tv = np.radians(angles.view_zenith.values)
    ts = np.radians(angles.solar_zenith.values)
    dphi = np.radians(angles.view_azimuth.values - angles.solar_azimuth.values)
    cos_g = np.cos(tv) * np.cos(ts) - np.sin(tv) * np.sin(ts) * np.cos(dphi)
    sga = np.degrees(np.arccos(np.clip(cos_g, -1.0, 1.0)))
    valid = (
        angles.view_zenith.valid
        & angles.view_azimuth.valid
        & angles.solar_zenith.valid
        & angles.solar_azimuth.valid
    )
    return Raster(angles.view_zenith.grid, np.where(valid, sga, 0.0), valid)


def day_night_mask(solar_zenith: Raster, threshold_deg: float = DAY_NIGHT_THRESHOLD_DEG) -> Raster:
    """Daytime where solar zenith is strictly below the threshold."""
    day = (solar_zenith.values < threshold_deg) & solar_zenith.valid
    return Raster(solar_zenith.grid, day.astype(float), solar_zenith.valid.copy())


def region_altitude_mask(grid: GeoGrid, dem: Raster, min_alt_m: float) -> Raster:
    if dem.grid != grid:
        raise GridError("DEM must be on the target grid")
    mask = (dem.values >= min_alt_m) & dem.valid
    return Raster(grid, mask.astype(float), dem.valid.copy())
