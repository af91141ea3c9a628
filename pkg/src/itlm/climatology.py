"""Cloud-fraction and mean-property maps, CTH->CTP conversion, ISCCP
classification, and seasonal diurnal-cycle curves."""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass

import numpy as np

from .grids import GeoGrid, GridError, Raster
from .metrics import month_to_season
from .scenegen import CLP_CLEAR, CLP_ICE, CLP_WATER, LabelSet

# ISA constants
ISA_P0_HPA = 1013.25
ISA_T0_K = 288.15
ISA_LAPSE_K_PER_M = 0.0065
ISA_EXPONENT = 5.2559
ISA_P11_HPA = 226.32
ISA_T11_K = 216.65
ISA_G = 9.80665
ISA_R = 287.053

# ISCCP bands: CTP < 440 | 440-680 | > 680 hPa, COT < 3.6 | 3.6-23 | > 23
ISCCP_CTP_EDGES = (440.0, 680.0)
ISCCP_COT_EDGES = (3.6, 23.0)
ISCCP_CLASSES = (
    ("cirrus", "cirrostratus", "deep_convective"),  # high
    ("altocumulus", "altostratus", "nimbostratus"),  # middle
    ("cumulus", "stratocumulus", "stratus"),  # low
)

DEFAULT_TZ_OFFSET_H = 8  # Beijing time


@dataclass
class TimeSeriesStack:
    """Strictly time-ordered label sets on one grid."""

    timestamps: list
    labelsets: list

    def __post_init__(self):
        if len(self.timestamps) != len(self.labelsets):
            raise ValueError("one timestamp per label set required")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")
        grids = {ls.grid for ls in self.labelsets}
        if len(grids) > 1:
            raise GridError("label sets must share one grid")

    @property
    def grid(self) -> GeoGrid:
        return self.labelsets[0].grid


@dataclass
class DiurnalCurve:
    season: str
    hours: np.ndarray  # 0..23 local
    ccf_pct: np.ndarray  # NaN where bin empty
    cth_km: np.ndarray
    cer_um: np.ndarray
    cot: np.ndarray
    n: np.ndarray  # time steps per bin


def cloud_fraction(series: TimeSeriesStack, which: str = "total", mask: np.ndarray | None = None) -> Raster:
    """Per-pixel % of valid time steps with the selected phase."""
    grid = series.grid
    hits = np.zeros(grid.shape)
    total = np.zeros(grid.shape)
    for ls in series.labelsets:
        valid = ls.clp.valid
        clp = ls.clp.values
        if which == "total":
            sel = clp != CLP_CLEAR
        elif which == "water":
            sel = clp == CLP_WATER
        elif which == "ice":
            sel = clp == CLP_ICE
        else:
            raise ValueError(f"unknown phase selector {which!r}")
        hits += np.where(valid, sel, 0.0)
        total += valid
    ok = total > 0
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    frac = np.where(ok, 100.0 * hits / np.maximum(total, 1), 0.0)
    return Raster(grid, frac, ok)


def mean_property_map(series: TimeSeriesStack, variable: str, mask: np.ndarray | None = None) -> Raster:
    """Per-pixel mean over time steps where the variable is valid (cloudy)."""
    grid = series.grid
    acc = np.zeros(grid.shape)
    cnt = np.zeros(grid.shape)
    for ls in series.labelsets:
        r: Raster = getattr(ls, variable)
        acc += np.where(r.valid, r.values, 0.0)
        cnt += r.valid
    ok = cnt > 0
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    return Raster(grid, np.where(ok, acc / np.maximum(cnt, 1), 0.0), ok)


def cth_to_ctp(cth_km) -> np.ndarray:
    """CTH (km) to pressure (hPa) via the International Standard Atmosphere."""
    h = np.asarray(cth_km, dtype=np.float64)
    if np.any((h < 0) | (h > 20)):
        raise ValueError("cloud-top height must be within [0, 20] km")
    hm = h * 1000.0
    tropo = ISA_P0_HPA * (1.0 - ISA_LAPSE_K_PER_M * hm / ISA_T0_K) ** ISA_EXPONENT
    strato = ISA_P11_HPA * np.exp(-(hm - 11000.0) * ISA_G / (ISA_R * ISA_T11_K))
    return np.where(h <= 11.0, tropo, strato)


def classify_isccp(ctp_hpa, cot) -> np.ndarray:
    """ISCCP 3x3 class names per cloudy pixel.

    Boundary values land in the higher-pressure / lower-COT class
    (strict < and > on the upper sides).
    """
    ctp = np.asarray(ctp_hpa, dtype=np.float64)
    tau = np.asarray(cot, dtype=np.float64)
    level = np.where(ctp < ISCCP_CTP_EDGES[0], 0, np.where(ctp < ISCCP_CTP_EDGES[1], 1, 2))
    thick = np.where(tau <= ISCCP_COT_EDGES[0], 0, np.where(tau <= ISCCP_COT_EDGES[1], 1, 2))
    lookup = np.array(ISCCP_CLASSES, dtype=object)
    return lookup[level, thick]


def is_deep_convective(ctp_hpa, cot) -> np.ndarray:
    ctp = np.asarray(ctp_hpa, dtype=np.float64)
    tau = np.asarray(cot, dtype=np.float64)
    return (ctp < ISCCP_CTP_EDGES[0]) & (tau > ISCCP_COT_EDGES[1])


def _local_hour(timestamp: float, tz_offset_h: int) -> int:
    t = _dt.datetime.fromtimestamp(timestamp, tz=_dt.timezone.utc)
    return (t.hour + tz_offset_h) % 24


def _month(timestamp: float) -> int:
    return _dt.datetime.fromtimestamp(timestamp, tz=_dt.timezone.utc).month


def diurnal_cycle(
    series: TimeSeriesStack,
    region_mask: np.ndarray,
    tz_offset_h: int = DEFAULT_TZ_OFFSET_H,
    deep_convective_only: bool = False,
) -> list:
    """Per-season local-hour curves of CCF and mean cloud properties."""
    region = np.asarray(region_mask, dtype=bool)
    bins = {}  # (season, hour) -> accumulators
    for ts, ls in zip(series.timestamps, series.labelsets):
        key = (month_to_season(_month(ts)), _local_hour(ts, tz_offset_h))
        valid = ls.clp.valid & region
        cloudy = (ls.clp.values != CLP_CLEAR) & valid
        if deep_convective_only:
            prop_ok = cloudy & ls.cth.valid & ls.cot.valid
            ctp = np.zeros(ls.grid.shape)
            ctp[prop_ok] = cth_to_ctp(np.clip(ls.cth.values[prop_ok], 0, 20))
            sel = prop_ok & is_deep_convective(ctp, ls.cot.values)
        else:
            sel = cloudy
        acc = bins.setdefault(key, {"n": 0, "ccf": 0.0, "cth": [], "cer": [], "cot": []})
        acc["n"] += 1
        nvalid = valid.sum()
        acc["ccf"] += 100.0 * sel.sum() / nvalid if nvalid else 0.0
        for var in ("cth", "cer", "cot"):
            r: Raster = getattr(ls, var)
            use = sel & r.valid
            if np.any(use):
                acc[var].append(float(r.values[use].mean()))

    curves = []
    for season in ("winter", "spring", "summer", "autumn"):
        hours = np.arange(24)
        ccf = np.full(24, np.nan)
        cth = np.full(24, np.nan)
        cer = np.full(24, np.nan)
        cot = np.full(24, np.nan)
        n = np.zeros(24, dtype=int)
        occupied = False
        for h in hours:
            acc = bins.get((season, int(h)))
            if acc is None:
                continue
            occupied = True
            n[h] = acc["n"]
            ccf[h] = acc["ccf"] / acc["n"]
            for arr, var in ((cth, "cth"), (cer, "cer"), (cot, "cot")):
                if acc[var]:
                    arr[h] = float(np.mean(acc[var]))
        if occupied:
            curves.append(DiurnalCurve(season, hours, ccf, cth, cer, cot, n))
    return curves


def curves_to_csv(curves: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["season", "hour", "variable", "mean", "n"])
        for c in curves:
            for h in c.hours:
                for var, arr in (("ccf_pct", c.ccf_pct), ("cth_km", c.cth_km), ("cer_um", c.cer_um), ("cot", c.cot)):
                    val = arr[h]
                    w.writerow([c.season, int(h), var, "" if np.isnan(val) else f"{val:.6f}", int(c.n[h])])


def write_pgm_quicklook(r: Raster, path, sidecar_path=None) -> None:
    """8-bit PGM with linear min/max scaling recorded in a JSON sidecar."""
    vals = r.values[r.valid]
    lo = float(vals.min()) if vals.size else 0.0
    hi = float(vals.max()) if vals.size else 1.0
    span = hi - lo if hi > lo else 1.0
    img = np.zeros(r.grid.shape, dtype=np.uint8)
    scaled = np.clip((r.values - lo) / span * 255.0, 0, 255)
    img[r.valid] = scaled[r.valid].astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{r.grid.ncols} {r.grid.nrows}\n255\n".encode())
        f.write(img.tobytes())
    if sidecar_path is not None:
        with open(sidecar_path, "w") as f:
            json.dump({"min": lo, "max": hi, "invalid_value": 0}, f, sort_keys=True)
