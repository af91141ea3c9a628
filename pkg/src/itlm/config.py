"""Run configuration: JSON document with strict (unknown-key rejecting)
validation and documented defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import tiles
from .forest import ForestHyper
from .scenegen import DEFAULT_A_COEFFS, DEFAULT_K_COEFFS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    lat_north: float = 45.0
    lon_west: float = 90.0
    dlat: float = 0.05
    dlon: float = 0.05
    nrows: int = 128
    ncols: int = 128


@dataclass
class SceneGenConfig:
    seed: int = 1
    n_scenes: int = 4
    test_seed: int = 100001  # disjoint from the training seed range
    n_test_scenes: int = 2
    subsat_lon: float = 104.7
    cloud_fraction_target: float = 0.55
    swath_width_px: int = 48
    noise_sigma_k: float = 0.2
    k_coeffs: list = field(default_factory=lambda: list(DEFAULT_K_COEFFS))
    a_coeffs: list = field(default_factory=lambda: list(DEFAULT_A_COEFFS))
    bias_dcth_high_km: float = -0.8
    bias_dcth_low_km: float = 0.4
    bias_fcer: float = 1.15
    bias_fcot: float = 1.20
    glint_cutoff_deg: float = 30.0


@dataclass
class TilesConfig:
    size: int = tiles.DEFAULT_TILE_SIZE
    train_stride: int = tiles.DEFAULT_TRAIN_STRIDE
    infer_stride: int = tiles.DEFAULT_INFER_STRIDE
    blend: str = tiles.BLEND_UNIFORM
    crop_margin: int = tiles.DEFAULT_CROP_MARGIN


@dataclass
class TrainSectionConfig:
    lr: float = 0.001
    epochs: int = 40
    finetune_epochs: int = 0  # 0 -> same as epochs
    finetune_lr: float = 0.0  # 0 -> same as lr
    # optional per-variable epoch overrides, e.g. {"cot": 12}; keys clp/cth/cer/cot
    epochs_per_var: dict = field(default_factory=dict)
    finetune_epochs_per_var: dict = field(default_factory=dict)
    finetune_stride: int = 0  # 0 -> same as tiles.train_stride
    clp_batch_size: int = 16
    prop_batch_size: int = 8
    seed: int = 0
    min_labeled_fraction: float = 0.10
    freeze_policy: str = "encoder"
    teacher_forcing: bool = False


@dataclass
class RfConfig:
    n_estimators: int = 180
    max_depth: int = 40
    min_samples_split: int = 3
    min_samples_leaf: int = 1
    features_per_split: str = "auto"
    sample_n: int = 50000
    seed: int = 0


@dataclass
class EvalConfig:
    hist_bins: int = 20
    max_dt_s: float = 450.0
    day_night_threshold_deg: float = 85.0


@dataclass
class ClimoConfig:
    region_lat_min: float = 20.0
    region_lat_max: float = 45.0
    region_lon_min: float = 63.0
    region_lon_max: float = 105.0
    min_alt_m: float = 2500.0
    tz_offset_h: int = 8


@dataclass
class IoConfig:
    out_dir: str = "runs/out"


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    scenegen: SceneGenConfig = field(default_factory=SceneGenConfig)
    tiles: TilesConfig = field(default_factory=TilesConfig)
    train: TrainSectionConfig = field(default_factory=TrainSectionConfig)
    rf: RfConfig = field(default_factory=RfConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    climo: ClimoConfig = field(default_factory=ClimoConfig)
    io: IoConfig = field(default_factory=IoConfig)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _build_section(cls, doc: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} in section '{path}'")
    return cls(**doc)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path!s} is not valid JSON: {e}")
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    sections = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(RunConfig):
        sub = doc.get(f.name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"config section '{f.name}' must be an object")
        kwargs[f.name] = _build_section(f.default_factory, sub, f.name)
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def default_schema() -> dict:
    """Schema-ish document: every key with its default, for discovery."""
    return config_to_dict(RunConfig())


def train_configs(cfg: RunConfig) -> dict:
    """Per-model TrainConfig objects from the config document."""
    t = cfg.train
    common = dict(
        lr=t.lr,
        epochs=t.epochs,
        seed=t.seed,
        min_labeled_fraction=t.min_labeled_fraction,
        freeze_policy=t.freeze_policy,
        tile_size=cfg.tiles.size,
        train_stride=cfg.tiles.train_stride,
        teacher_forcing=t.teacher_forcing,
    )
    unknown = set(t.epochs_per_var) | set(t.finetune_epochs_per_var)
    unknown -= {"clp", "cth", "cer", "cot"}
    if unknown:
        raise ConfigError(f"unknown variable(s) {sorted(unknown)} in per-variable epoch overrides")
    out = {}
    for var in ("clp", "cth", "cer", "cot"):
        kw = dict(common)
        kw["epochs"] = int(t.epochs_per_var.get(var, t.epochs))
        loss = "ce" if var == "clp" else "mse"
        bs = t.clp_batch_size if var == "clp" else t.prop_batch_size
        out[var] = TrainConfig(loss=loss, batch_size=bs, **kw)
    return out


def forest_hyper(cfg: RunConfig) -> ForestHyper:
    r = cfg.rf
    return ForestHyper(
        n_estimators=r.n_estimators,
        max_depth=r.max_depth,
        min_samples_split=r.min_samples_split,
        min_samples_leaf=r.min_samples_leaf,
        features_per_split=r.features_per_split,
        seed=r.seed,
    )
