"""Synthetic scene truth, toy thermal-IR forward model, and label simulators.

Everything here is deterministic per seed: same seed, same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .grids import GeoGrid, GridError, Raster, read_rgrd, write_rgrd

BT_CHANNEL_NAMES = ["bt_6.25", "bt_7.1", "bt_8.5", "bt_10.8", "bt_12.0", "bt_13.5"]
ATP_LEVELS_HPA = [1000, 850, 500, 300]
RHP_LEVELS_HPA = [1000, 850, 500, 300]
N_SURF_EMIS = 6

# Stack order is fixed: 6 BTs, view zenith, 4 ATP, 4 RHP, SKT, TCWV, 6 SE.
STACK_CHANNEL_NAMES = (
    BT_CHANNEL_NAMES
    + ["view_zenith"]
    + [f"atp_{p}" for p in ATP_LEVELS_HPA]
    + [f"rhp_{p}" for p in RHP_LEVELS_HPA]
    + ["skt", "tcwv"]
    + [f"se_{i}" for i in range(N_SURF_EMIS)]
)
N_CHANNELS_BASE = len(STACK_CHANNEL_NAMES)  # 23
CLP_CHANNEL_NAME = "clp_input"

CLP_CLEAR, CLP_WATER, CLP_ICE = 0, 1, 2

# Per-band extinction and water-vapor sensitivity; water-vapor channels
# (6.25 / 7.1 um) attenuate the clear-sky signal most.
DEFAULT_K_COEFFS = (0.15, 0.18, 0.45, 0.60, 0.55, 0.35)
DEFAULT_A_COEFFS = (1.2, 1.0, 0.5, 0.3, 0.45, 0.7)

LAPSE_RATE_K_PER_KM = 6.5
ICE_THRESHOLD_K = 253.0


@dataclass
class SceneTruth:
    clp: Raster  # 0 clear, 1 water, 2 ice
    cth: Raster  # km
    cer: Raster  # um
    cot: Raster  # unitless
    skt: Raster  # K
    tcwv: Raster  # kg/m^2
    atp: list  # 4 rasters, K
    rhp: list  # 4 rasters, %
    se: list  # 6 rasters, emissivity

    @property
    def grid(self) -> GeoGrid:
        return self.clp.grid


@dataclass
class SceneStack:
    """Ordered multi-channel model input."""

    grid: GeoGrid
    channels: list  # of Raster
    names: list

    def __post_init__(self):
        if len(self.channels) not in (N_CHANNELS_BASE, N_CHANNELS_BASE + 1):
            raise GridError(f"stack must have 23 or 24 channels, got {len(self.channels)}")
        for r in self.channels:
            if r.grid != self.grid:
                raise GridError("all stack channels must share one grid")

    def to_array(self) -> np.ndarray:
        """[C, H, W] float32 array; invalid pixels carried as stored values."""
        return np.stack([c.values for c in self.channels]).astype(np.float32)


@dataclass
class LabelSet:
    clp: Raster
    cth: Raster
    cer: Raster
    cot: Raster
    coverage: Raster  # boolean, where labels exist

    @property
    def grid(self) -> GeoGrid:
        return self.clp.grid

    def coverage_mask(self) -> np.ndarray:
        return self.coverage.values.astype(bool) & self.coverage.valid


@dataclass
class TrackSample:
    lat: float
    lon: float
    time: float
    clp: int
    cth: float


@dataclass
class SourceBias:
    """Sign structure of the dense biased label source: high clouds biased
    low, low clouds biased high, CER/COT overestimated."""

    dcth_high_km: float = -0.8
    dcth_low_km: float = 0.4
    cth_high_threshold_km: float = 8.0
    fcer: float = 1.15
    fcot: float = 1.20
    glint_cutoff_deg: float = 30.0


@dataclass
class TruthParams:
    cloud_fraction_target: float = 0.55
    lapse_rate: float = LAPSE_RATE_K_PER_KM
    ice_threshold_k: float = ICE_THRESHOLD_K


def gaussian_field(seed: int, grid: GeoGrid, spectral_exponent: float, amplitude: float = 1.0) -> Raster:
    """Zero-mean unit-variance correlated field via spectral synthesis.

    White noise is shaped by |k|^(-beta/2) in the Fourier domain; beta=0
    gives white noise, larger beta smoother fields.
    """
    if not (0.0 <= spectral_exponent <= 5.0):
        raise ValueError("spectral exponent must be in [0, 5]")
    rng = np.random.default_rng(seed)
    nr, nc = grid.shape
    noise = rng.standard_normal((nr, nc))
    spec = np.fft.fft2(noise)
    ky = np.fft.fftfreq(nr)[:, None]
    kx = np.fft.fftfreq(nc)[None, :]
    k = np.hypot(ky, kx)
    k[0, 0] = 1.0
    spec *= k ** (-spectral_exponent / 2.0)
    spec[0, 0] = 0.0
    out = np.fft.ifft2(spec).real
    std = out.std()
    if std > 0:
        out = (out - out.mean()) / std
    return Raster(grid, amplitude * out, np.ones(grid.shape, dtype=bool))


def _rescale(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map a field onto [lo, hi] via its own min/max."""
    xmin, xmax = x.min(), x.max()
    if xmax - xmin < 1e-12:
        return np.full_like(x, 0.5 * (lo + hi))
    return lo + (hi - lo) * (x - xmin) / (xmax - xmin)


def gen_truth(seed: int, grid: GeoGrid, params: TruthParams | None = None) -> SceneTruth:
    """Deterministic synthetic truth fields with correlated structure."""
    params = params or TruthParams()
    if not (0.0 < params.cloud_fraction_target < 1.0):
        raise ValueError("cloud fraction target must be in (0, 1)")
    if grid.nrows < 2 or grid.ncols < 2:
        raise GridError("truth generation needs at least a 2x2 grid")

    f_cloud = gaussian_field(seed * 13 + 1, grid, 3.0).values
    f_cth = gaussian_field(seed * 13 + 2, grid, 3.0).values
    f_cer = gaussian_field(seed * 13 + 3, grid, 2.5).values
    f_cot = gaussian_field(seed * 13 + 4, grid, 3.0).values
    f_skt = gaussian_field(seed * 13 + 5, grid, 4.0).values
    f_tcwv = gaussian_field(seed * 13 + 6, grid, 4.0).values

    thresh = np.quantile(f_cloud, 1.0 - params.cloud_fraction_target)
    cloudy = f_cloud > thresh

    skt_v = _rescale(f_skt, 260.0, 310.0)
    cth_v = np.where(cloudy, _rescale(f_cth, 1.0, 16.0), 0.0)
    tc = skt_v - params.lapse_rate * cth_v
    clp_v = np.where(cloudy, np.where(tc < params.ice_threshold_k, CLP_ICE, CLP_WATER), CLP_CLEAR)

    cer_water = _rescale(f_cer, 5.0, 25.0)
    cer_ice = _rescale(f_cer, 15.0, 45.0)
    cer_v = np.where(cloudy, np.where(clp_v == CLP_ICE, cer_ice, cer_water), 0.0)
    cot_v = np.where(cloudy, 10.0 ** _rescale(f_cot, np.log10(0.1), np.log10(150.0)), 0.0)

    tcwv_v = _rescale(f_tcwv, 5.0, 60.0)
    ones = np.ones(grid.shape, dtype=bool)

    # Temperature profile cools with level height; humidity stays in [10, 95].
    atp = []
    level_alt_km = {1000: 0.1, 850: 1.5, 500: 5.6, 300: 9.2}
    for p in ATP_LEVELS_HPA:
        atp.append(Raster(grid, skt_v - 2.0 - params.lapse_rate * level_alt_km[p], ones.copy()))
    rhp = []
    for idx, p in enumerate(RHP_LEVELS_HPA):
        f = gaussian_field(seed * 13 + 7 + idx, grid, 3.5).values
        rhp.append(Raster(grid, _rescale(f, 10.0, 95.0), ones.copy()))
    se = []
    for idx in range(N_SURF_EMIS):
        f = gaussian_field(seed * 13 + 11 + idx, grid, 4.0).values
        se.append(Raster(grid, _rescale(f, 0.8, 1.0), ones.copy()))

    return SceneTruth(
        clp=Raster(grid, clp_v.astype(float), ones.copy()),
        cth=Raster(grid, cth_v, cloudy.copy()),
        cer=Raster(grid, cer_v, cloudy.copy()),
        cot=Raster(grid, cot_v, cloudy.copy()),
        skt=Raster(grid, skt_v, ones.copy()),
        tcwv=Raster(grid, tcwv_v, ones.copy()),
        atp=atp,
        rhp=rhp,
        se=se,
    )


def forward_bt(
    truth: SceneTruth,
    view_zenith: Raster,
    k_coeffs=DEFAULT_K_COEFFS,
    a_coeffs=DEFAULT_A_COEFFS,
    noise_sigma: float = 0.2,
    seed: int = 0,
) -> list:
    """Toy thermal-IR brightness temperatures for the 6 bands.

    BT = eps * Tc + (1 - eps) * (SKT - a * TCWV) with cloud emissivity
    eps = 1 - exp(-k * COT / mu); emissivity saturates for thick cloud, which
    is the ambiguity the image model has to exploit context to resolve.
    """
    if any(k <= 0 for k in k_coeffs) or any(a <= 0 for a in a_coeffs):
        raise ValueError("forward-model coefficients must be positive")
    mu = np.cos(np.radians(view_zenith.values))
    if np.any((mu <= 0) & view_zenith.valid):
        raise ValueError("view zenith at or beyond 90 degrees in the valid domain")
    mu = np.where(mu > 0, mu, 1.0)

    cloudy = truth.clp.values != CLP_CLEAR
    tc = truth.skt.values - LAPSE_RATE_K_PER_KM * truth.cth.values
    cot = np.where(cloudy, truth.cot.values, 0.0)
    rng = np.random.default_rng(seed)
    out = []
    valid = truth.skt.valid & view_zenith.valid
    for ch, (k, a) in enumerate(zip(k_coeffs, a_coeffs)):
        bt_clear = truth.skt.values - a * truth.tcwv.values
        eps = np.where(cloudy, 1.0 - np.exp(-k * cot / mu), 0.0)
        bt = eps * tc + (1.0 - eps) * bt_clear
        if noise_sigma > 0:
            bt = bt + noise_sigma * rng.standard_normal(truth.grid.shape)
        out.append(Raster(truth.grid, bt, valid.copy()))
    return out


def build_stack(
    truth: SceneTruth,
    bts: list,
    view_zenith: Raster,
    clp_channel: Raster | None = None,
) -> SceneStack:
    """Assemble the fixed-order 23-channel stack, 24 with a CLP channel.

    The CLP channel is encoded as class index scaled to {0, 0.5, 1}.
    """
    if len(bts) != 6:
        raise GridError("expected 6 brightness-temperature channels")
    channels = list(bts) + [view_zenith] + truth.atp + truth.rhp + [truth.skt, truth.tcwv] + truth.se
    names = list(STACK_CHANNEL_NAMES)
    for r in channels:
        if r.grid != truth.grid:
            raise GridError("stack channel grid mismatch")
    if clp_channel is not None:
        if clp_channel.grid != truth.grid:
            raise GridError("CLP channel grid mismatch")
        enc = Raster(truth.grid, clp_channel.values / 2.0, clp_channel.valid.copy())
        channels.append(enc)
        names = names + [CLP_CHANNEL_NAME]
    return SceneStack(truth.grid, channels, names)


def simulate_source_labels(
    truth: SceneTruth,
    angles: geometry.GeoAngles,
    bias: SourceBias | None = None,
) -> LabelSet:
    """Dense biased labels, available only in daytime away from sun glint."""
    bias = bias or SourceBias()
    day = geometry.day_night_mask(angles.solar_zenith).values.astype(bool)
    sga = geometry.sun_glint_angle(angles)
    coverage = day & (sga.values > bias.glint_cutoff_deg) & sga.valid

    cloudy = truth.clp.values != CLP_CLEAR
    dcth = np.where(truth.cth.values > bias.cth_high_threshold_km, bias.dcth_high_km, bias.dcth_low_km)
    cth_v = np.where(cloudy, np.clip(truth.cth.values + dcth, 0.1, 18.0), 0.0)
    cer_v = np.where(cloudy, truth.cer.values * bias.fcer, 0.0)
    cot_v = np.where(cloudy, truth.cot.values * bias.fcot, 0.0)

    grid = truth.grid
    cov_bool = coverage
    return LabelSet(
        clp=Raster(grid, truth.clp.values.copy(), cov_bool.copy()),
        cth=Raster(grid, cth_v, cov_bool & cloudy),
        cer=Raster(grid, cer_v, cov_bool & cloudy),
        cot=Raster(grid, cot_v, cov_bool & cloudy),
        coverage=Raster(grid, cov_bool.astype(float), np.ones(grid.shape, dtype=bool)),
    )


def simulate_target_labels(
    truth: SceneTruth,
    center_col: int,
    width_px: int,
    seed: int = 0,
    cth_sigma_km: float = 0.2,
    cer_sigma_um: float = 0.5,
    cot_rel_sigma: float = 0.02,
) -> LabelSet:
    """Accurate labels restricted to a vertical swath band, with small noise."""
    if width_px < 1:
        raise ValueError("swath width must be at least one pixel")
    grid = truth.grid
    cols = np.arange(grid.ncols)
    half = width_px / 2.0
    in_swath = (cols >= center_col - half) & (cols < center_col + half)
    coverage = np.broadcast_to(in_swath, grid.shape).copy()

    rng = np.random.default_rng(seed)
    cloudy = truth.clp.values != CLP_CLEAR
    cth_v = truth.cth.values + cth_sigma_km * rng.standard_normal(grid.shape)
    cer_v = truth.cer.values + cer_sigma_um * rng.standard_normal(grid.shape)
    cot_v = truth.cot.values * (1.0 + cot_rel_sigma * rng.standard_normal(grid.shape))
    cth_v = np.where(cloudy, np.clip(cth_v, 0.05, 18.0), 0.0)
    cer_v = np.where(cloudy, np.maximum(cer_v, 0.5), 0.0)
    cot_v = np.where(cloudy, np.maximum(cot_v, 0.01), 0.0)

    return LabelSet(
        clp=Raster(grid, truth.clp.values.copy(), coverage.copy()),
        cth=Raster(grid, cth_v, coverage & cloudy),
        cer=Raster(grid, cer_v, coverage & cloudy),
        cot=Raster(grid, cot_v, coverage & cloudy),
        coverage=Raster(grid, coverage.astype(float), np.ones(grid.shape, dtype=bool)),
    )


def simulate_track(truth: SceneTruth, path, time: float) -> list:
    """Nearest-pixel truth samples along a 1-D ground track."""
    grid = truth.grid
    samples = []
    for lat, lon in path:
        i = int(np.rint((grid.lat0 - lat) / grid.dlat - 0.5))
        j = int(np.rint((lon - grid.lon0) / grid.dlon - 0.5))
        if not (0 <= i < grid.nrows and 0 <= j < grid.ncols):
            raise GridError(f"track point ({lat}, {lon}) outside the scene grid")
        samples.append(
            TrackSample(
                lat=lat,
                lon=lon,
                time=time,
                clp=int(truth.clp.values[i, j]),
                cth=float(truth.cth.values[i, j]),
            )
        )
    return samples


@dataclass
class Scene:
    """One synthetic scene with everything the pipeline consumes."""

    index: int
    seed: int
    timestamp: float
    truth: SceneTruth
    stack: SceneStack  # 23 channels
    source_labels: LabelSet
    target_labels: LabelSet
    track: list
    angles: geometry.GeoAngles


@dataclass
class DatasetParams:
    subsat_lon: float = 104.7
    truth: TruthParams = field(default_factory=TruthParams)
    bias: SourceBias = field(default_factory=SourceBias)
    swath_width_px: int = 48
    noise_sigma_k: float = 0.2
    k_coeffs: tuple = DEFAULT_K_COEFFS
    a_coeffs: tuple = DEFAULT_A_COEFFS
    track_points: int = 64


def _default_timestamps(n_scenes: int) -> list:
    """Spread scenes over months 1..12 and hours of day, year 2020."""
    import calendar

    out = []
    for i in range(n_scenes):
        month = (i % 12) + 1
        hour = (i * 7) % 24
        day = (i // 12) % 27 + 1
        out.append(calendar.timegm((2020, month, day, hour, 0, 0, 0, 0, 0)))
    return out


def gen_scene(seed: int, index: int, grid: GeoGrid, timestamp: float, params: DatasetParams) -> Scene:
    scene_seed = seed + index
    truth = gen_truth(scene_seed, grid, params.truth)
    vz = geometry.view_zenith(grid, params.subsat_lon)
    va = geometry.view_azimuth(grid, params.subsat_lon)
    sz, sa = geometry.solar_position(grid, timestamp)
    angles = geometry.GeoAngles(vz, va, sz, sa)
    bts = forward_bt(
        truth, vz, params.k_coeffs, params.a_coeffs, params.noise_sigma_k, seed=scene_seed * 7 + 3
    )
    stack = build_stack(truth, bts, vz)
    source = simulate_source_labels(truth, angles, params.bias)
    rng = np.random.default_rng(scene_seed * 7 + 5)
    center_col = int(rng.integers(0, grid.ncols))
    target = simulate_target_labels(truth, center_col, params.swath_width_px, seed=scene_seed * 7 + 6)
    lats = np.linspace(
        grid.lat0 - 0.5 * grid.dlat, grid.lat0 - (grid.nrows - 0.5) * grid.dlat, params.track_points
    )
    track_col = int(rng.integers(0, grid.ncols))
    lon = grid.lon0 + (track_col + 0.5) * grid.dlon
    track = simulate_track(truth, [(la, lon) for la in lats], timestamp)
    return Scene(index, scene_seed, timestamp, truth, stack, source, target, track, angles)


def gen_dataset(
    seed: int,
    n_scenes: int,
    grid: GeoGrid,
    timestamps=None,
    params: DatasetParams | None = None,
) -> list:
    """Deterministic scene collection; per-scene seed = seed + index."""
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    params = params or DatasetParams()
    timestamps = list(timestamps) if timestamps is not None else _default_timestamps(n_scenes)
    if len(timestamps) != n_scenes:
        raise ValueError("one timestamp per scene required")
    return [gen_scene(seed, i, grid, timestamps[i], params) for i in range(n_scenes)]


# --- scene persistence: directory of RGRD rasters + JSON manifest ---------


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rasters = {}
    for name, r in zip(scene.stack.names, scene.stack.channels):
        rasters[f"stack_{name}"] = r
    for prefix, labels in (("source", scene.source_labels), ("target", scene.target_labels)):
        rasters[f"{prefix}_clp"] = labels.clp
        rasters[f"{prefix}_cth"] = labels.cth
        rasters[f"{prefix}_cer"] = labels.cer
        rasters[f"{prefix}_cot"] = labels.cot
        rasters[f"{prefix}_coverage"] = labels.coverage
    for name in ("clp", "cth", "cer", "cot", "skt", "tcwv"):
        rasters[f"truth_{name}"] = getattr(scene.truth, name)
    rasters["solar_zenith"] = scene.angles.solar_zenith
    for fname, r in rasters.items():
        write_rgrd(r, d / f"{fname}.rgrd")
    manifest = {
        "index": scene.index,
        "seed": scene.seed,
        "timestamp": scene.timestamp,
        "channel_order": scene.stack.names,
        "grid": scene.stack.grid.to_dict(),
        "track": [
            {"lat": s.lat, "lon": s.lon, "time": s.time, "clp": s.clp, "cth": s.cth}
            for s in scene.track
        ],
        "rasters": sorted(rasters),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_scene_stack(directory) -> SceneStack:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    channels = [read_rgrd(d / f"stack_{name}.rgrd") for name in manifest["channel_order"]]
    grid = GeoGrid.from_dict(manifest["grid"])
    return SceneStack(grid, channels, list(manifest["channel_order"]))


def load_scene_labels(directory, which: str) -> LabelSet:
    d = Path(directory)
    return LabelSet(
        clp=read_rgrd(d / f"{which}_clp.rgrd"),
        cth=read_rgrd(d / f"{which}_cth.rgrd"),
        cer=read_rgrd(d / f"{which}_cer.rgrd"),
        cot=read_rgrd(d / f"{which}_cot.rgrd"),
        coverage=read_rgrd(d / f"{which}_coverage.rgrd"),
    )
