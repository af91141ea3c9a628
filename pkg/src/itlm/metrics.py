"""Evaluation machinery: confusion matrix / OA, regression scores, joint
histograms, track collocation, and day/night x season stratification.

Class codes: 0 clear, 1 water, 2 ice; codes >= 3 (mixed / uncertain) are
excluded from every statistic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .grids import GeoGrid, GridError
from .scenegen import LabelSet, TrackSample

CLASS_NAMES = ("clear", "water", "ice")
N_CLASSES = 3
EXCLUDED_CODE_MIN = 3  # mixed / uncertain

SEASONS = ("winter", "spring", "summer", "autumn")
_MONTH_SEASON = {
    12: "winter", 1: "winter", 2: "winter",
    3: "spring", 4: "spring", 5: "spring",
    6: "summer", 7: "summer", 8: "summer",
    9: "autumn", 10: "autumn", 11: "autumn",
}

DEFAULT_MAX_DT_S = 450.0


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [3, 3], rows = reference, cols = prediction

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def oa_pct(self) -> float:
        total = self.counts.sum()
        return 100.0 * float(np.trace(self.counts)) / total if total else float("nan")

    def to_dict(self) -> dict:
        return {
            "classes": list(CLASS_NAMES),
            "counts": self.counts.astype(int).tolist(),
            "n": self.n,
            "oa_pct": self.oa_pct,
        }


@dataclass
class ScoreReport:
    n: int
    oa_pct: float | None = None
    r: float | None = None
    mae: float | None = None
    mbe: float | None = None
    rmse: float | None = None

    def to_dict(self) -> dict:
        return {"n": self.n, "oa_pct": self.oa_pct, "r": self.r, "mae": self.mae, "mbe": self.mbe, "rmse": self.rmse}


@dataclass
class JointHistogram:
    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray
    diagonal_fraction: float


def _valid_pairs(pred: np.ndarray, ref: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape:
        raise ValueError("prediction/reference shape mismatch")
    m = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    return pred[m], ref[m]


def confusion(pred: np.ndarray, ref: np.ndarray, mask=None) -> ConfusionMatrix:
    p, r = _valid_pairs(pred, ref, mask)
    keep = (p < EXCLUDED_CODE_MIN) & (r < EXCLUDED_CODE_MIN) & (p >= 0) & (r >= 0)
    p, r = p[keep].astype(int), r[keep].astype(int)
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (r, p), 1)
    return ConfusionMatrix(counts)


def scores(pred: np.ndarray, ref: np.ndarray, mask=None) -> ScoreReport:
    """R / MAE / MBE / RMSE; R is reported missing when a side is constant."""
    p, r = _valid_pairs(pred, ref, mask)
    n = len(p)
    if n == 0:
        return ScoreReport(n=0)
    d = p - r
    mbe = float(d.mean())
    mae = float(np.abs(d).mean())
    rmse = float(np.sqrt((d * d).mean()))
    rr = None
    if n >= 2 and p.std() > 0 and r.std() > 0:
        rr = float(np.corrcoef(p, r)[0, 1])
    return ScoreReport(n=n, r=rr, mae=mae, mbe=mbe, rmse=rmse)


def cloud_detection_oa(pred_clp: np.ndarray, ref_clp: np.ndarray, mask=None) -> float:
    """Binary clear-vs-cloudy overall accuracy, %."""
    p, r = _valid_pairs(pred_clp, ref_clp, mask)
    keep = (p < EXCLUDED_CODE_MIN) & (r < EXCLUDED_CODE_MIN) & (p >= 0) & (r >= 0)
    p, r = p[keep] > 0, r[keep] > 0
    if len(p) == 0:
        return float("nan")
    return 100.0 * float(np.mean(p == r))


def joint_hist(pred: np.ndarray, ref: np.ndarray, edges: np.ndarray, mask=None) -> JointHistogram:
    p, r = _valid_pairs(pred, ref, mask)
    if len(p) == 0:
        raise ValueError("joint histogram over an empty mask")
    edges = np.asarray(edges, dtype=np.float64)
    counts, xe, ye = np.histogram2d(r, p, bins=[edges, edges])
    total = counts.sum()
    area = np.outer(np.diff(xe), np.diff(ye))
    density = counts / (total * area) if total else counts
    # fraction of pairs within one bin of the diagonal
    ib = np.clip(np.digitize(r, edges) - 1, 0, len(edges) - 2)
    jb = np.clip(np.digitize(p, edges) - 1, 0, len(edges) - 2)
    diag = float(np.mean(np.abs(ib - jb) <= 1))
    return JointHistogram(xe, ye, counts, density, diag)


@dataclass
class CollocatedPair:
    lat: float
    lon: float
    time: float
    ref_clp: int
    ref_cth: float
    pred_clp: int
    pred_cth: float
    solar_zenith: float = float("nan")


def collocate_track(
    track: list,
    product: LabelSet,
    grid: GeoGrid,
    product_time: float = 0.0,
    max_dt_s: float = DEFAULT_MAX_DT_S,
    solar_zenith: np.ndarray | None = None,
) -> list:
    """Nearest-pixel pairing of track samples with a gridded product."""
    pairs = []
    for s in track:
        if abs(s.time - product_time) > max_dt_s:
            continue
        i = int(np.rint((grid.lat0 - s.lat) / grid.dlat - 0.5))
        j = int(np.rint((s.lon - grid.lon0) / grid.dlon - 0.5))
        if not (0 <= i < grid.nrows and 0 <= j < grid.ncols):
            continue
        if not product.clp.valid[i, j]:
            continue
        pred_clp = int(product.clp.values[i, j])
        pred_cth = float(product.cth.values[i, j]) if product.cth.valid[i, j] else float("nan")
        sz = float(solar_zenith[i, j]) if solar_zenith is not None else float("nan")
        pairs.append(
            CollocatedPair(s.lat, s.lon, s.time, s.clp, s.cth, pred_clp, pred_cth, sz)
        )
    return pairs


def month_to_season(month: int) -> str:
    return _MONTH_SEASON[month]


@dataclass
class StratifiedRow:
    stratum: tuple  # (day|night, season)
    clp: ConfusionMatrix
    cld_oa_pct: float
    cth: ScoreReport


def stratified_report(
    pairs: list,
    months: list,
    day_flags: list,
) -> list:
    """One row per occupied (day/night, season) stratum over collocated pairs."""
    if not (len(pairs) == len(months) == len(day_flags)):
        raise ValueError("pairs, months, and day flags must align")
    strata = {}
    for pair, month, day in zip(pairs, months, day_flags):
        key = ("day" if day else "night", month_to_season(month))
        strata.setdefault(key, []).append(pair)
    rows = []
    for key in sorted(strata):
        group = strata[key]
        pc = np.array([g.pred_clp for g in group], dtype=float)
        rc = np.array([g.ref_clp for g in group], dtype=float)
        cm = confusion(pc, rc)
        cld = cloud_detection_oa(pc, rc)
        cth_mask = np.array(
            [np.isfinite(g.pred_cth) and g.ref_clp > 0 and g.pred_clp > 0 for g in group]
        )
        ph = np.array([g.pred_cth if np.isfinite(g.pred_cth) else 0.0 for g in group])
        rh = np.array([g.ref_cth for g in group])
        rows.append(StratifiedRow(key, cm, cld, scores(ph, rh, cth_mask)))
    return rows


# --- report serialization ----------------------------------------------------


def report_to_json(report: dict, path) -> None:
    def default(o):
        if isinstance(o, (ConfusionMatrix, ScoreReport)):
            return o.to_dict()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer, np.floating)):
            return o.item()
        raise TypeError(f"not JSON-serializable: {type(o)}")

    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=default)


def stratified_to_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["daynight", "season", "n", "oa_pct", "cld_oa_pct", "r", "mae", "mbe", "rmse"])
        for row in rows:
            s = row.cth
            w.writerow(
                [
                    row.stratum[0],
                    row.stratum[1],
                    row.clp.n,
                    f"{row.clp.oa_pct:.4f}",
                    f"{row.cld_oa_pct:.4f}",
                    "" if s.r is None else f"{s.r:.6f}",
                    "" if s.mae is None else f"{s.mae:.6f}",
                    "" if s.mbe is None else f"{s.mbe:.6f}",
                    "" if s.rmse is None else f"{s.rmse:.6f}",
                ]
            )
