"""Two-stage training (pre-train on dense biased labels, fine-tune on sparse
accurate labels), model chaining, and tiled full-scene inference."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import model as nnm
from . import scenegen, tiles
from .grids import Raster
from .scenegen import CLP_CLEAR, LabelSet, Scene, SceneStack

FREEZE_NONE = "none"
FREEZE_ENCODER = "encoder"
FREEZE_ALL_BUT_HEAD = "all_but_head"

VARIABLES = ("clp", "cth", "cer", "cot")


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 40
    batch_size: int = 16
    loss: str = "ce"  # "ce" | "mse"
    seed: int = 0
    min_labeled_fraction: float = 0.10
    freeze_policy: str = FREEZE_ENCODER
    tile_size: int = tiles.DEFAULT_TILE_SIZE
    train_stride: int = 0  # 0 -> tile_size (non-overlapping)
    log_cot: bool = True  # regress COT as log10
    teacher_forcing: bool = False  # feed label CLP instead of predicted CLP

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm)")
        if not (0.0 < self.min_labeled_fraction <= 1.0):
            raise ValueError("min_labeled_fraction must be in (0, 1]")
        if self.freeze_policy not in (FREEZE_NONE, FREEZE_ENCODER, FREEZE_ALL_BUT_HEAD):
            raise ValueError(f"unknown freeze policy {self.freeze_policy!r}")


@dataclass
class ModelSuite:
    clp: nnm.ResUnet
    cth: nnm.ResUnet
    cer: nnm.ResUnet
    cot: nnm.ResUnet

    def models(self):
        return {"clp": self.clp, "cth": self.cth, "cer": self.cer, "cot": self.cot}


@dataclass
class TileBatch:
    """Training tiles as arrays: inputs [N,C,s,s], labels [N,s,s], mask [N,s,s]."""

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray


def _label_arrays(labels: LabelSet, variable: str, log_cot: bool) -> tuple[np.ndarray, np.ndarray]:
    cov = labels.coverage_mask()
    if variable == "clp":
        return labels.clp.values, cov & labels.clp.valid
    r: Raster = getattr(labels, variable)
    mask = cov & r.valid
    vals = r.values
    if variable == "cot" and log_cot:
        vals = np.where(mask, np.log10(np.maximum(vals, 1e-3)), 0.0)
    return vals, mask


def build_samples(
    dataset: list,
    selector: str,
    variable: str,
    cfg: TrainConfig,
    clp_channels: dict | None = None,
) -> TileBatch:
    """Disjoint tiles over all scenes; tiles below the labeled-pixel fraction
    threshold are dropped; order shuffled deterministically per seed.

    `clp_channels` maps scene index to the encoded 24th channel for
    property-model training.
    """
    if not dataset:
        raise ValueError("empty dataset")
    xs, ys, ms = [], [], []
    for scene in dataset:
        labels = scene.source_labels if selector == "source" else scene.target_labels
        vals, mask = _label_arrays(labels, variable, cfg.log_cot)
        arr = scene.stack.to_array()
        if clp_channels is not None:
            extra = clp_channels[scene.index].astype(np.float32)
            arr = np.concatenate([arr, extra[None]], axis=0)
        plan = tiles.plan_tiles(
            *scene.stack.grid.shape, size=cfg.tile_size, stride=cfg.train_stride or cfg.tile_size
        )
        for spec in plan.specs:
            mtile = tiles.extract_tile(mask.astype(np.float32), spec)[0] > 0.5
            if mtile.mean() < cfg.min_labeled_fraction:
                continue
            xs.append(tiles.extract_tile(arr, spec))
            ys.append(tiles.extract_tile(vals.astype(np.float32), spec)[0])
            ms.append(mtile)
    if not xs:
        return TileBatch(
            np.zeros((0, 0, cfg.tile_size, cfg.tile_size), np.float32),
            np.zeros((0, cfg.tile_size, cfg.tile_size), np.float32),
            np.zeros((0, cfg.tile_size, cfg.tile_size), bool),
        )
    x = np.stack(xs)
    y = np.stack(ys)
    m = np.stack(ms)
    order = np.random.default_rng(cfg.seed).permutation(len(x))
    return TileBatch(x[order], y[order], m[order])


def _input_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = x.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.maximum(std, 1e-6)


def apply_freeze(model: nnm.ResUnet, policy: str) -> set:
    """Names of trainable tensors under the freeze policy; frozen batch-norm
    modules are also switched to eval so running stats stop updating."""
    all_names = [n for n, _ in model.named_parameters()]
    if policy == FREEZE_NONE:
        return set(all_names)
    if policy == FREEZE_ALL_BUT_HEAD:
        return {n for n in all_names if n.startswith("head.")}
    if policy == FREEZE_ENCODER:
        frozen_prefixes = ("stem.", "enc_blocks.", "downs.")
        return {n for n in all_names if not n.startswith(frozen_prefixes)}
    raise ValueError(f"unknown freeze policy {policy!r}")


def _frozen_module_prefixes(policy: str):
    if policy == FREEZE_ENCODER:
        return ("stem", "enc_blocks", "downs")
    if policy == FREEZE_ALL_BUT_HEAD:
        return ("stem", "enc_blocks", "downs", "bottleneck", "up_convs", "dec_blocks")
    return ()


def _set_frozen_bn_eval(model: nnm.ResUnet, policy: str) -> None:
    for prefix in _frozen_module_prefixes(policy):
        getattr(model, prefix).eval()


def _train_loop(
    model: nnm.ResUnet,
    batch: TileBatch,
    cfg: TrainConfig,
    trainable: set | None = None,
    freeze_policy: str = FREEZE_NONE,
) -> list:
    if len(batch.x) == 0:
        raise ValueError("no training tiles available")
    torch.manual_seed(cfg.seed)
    x = torch.as_tensor(batch.x)
    mask = torch.as_tensor(batch.mask)
    if cfg.loss == "ce":
        y = torch.as_tensor(batch.y).long()
    else:
        tm = float(model.target_mean.item())
        ts = float(model.target_std.item())
        y = (torch.as_tensor(batch.y) - tm) / ts

    state = nnm.AdamState()
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(batch.x)
    curve = []
    for _ in range(cfg.epochs):
        model.train()
        _set_frozen_bn_eval(model, freeze_policy)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm requires >= 2
            xb, yb, mb = x[idx], y[idx], mask[idx]
            if not torch.any(mb):
                continue
            out = model(xb)
            if cfg.loss == "ce":
                loss = nnm.cross_entropy_masked(out, yb, mb)
            else:
                loss = nnm.mse_masked(out, yb, mb)
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite training loss")
            model.zero_grad()
            loss.backward()
            nnm.adam_step(model.named_parameters(), state, cfg.lr, trainable)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        curve.append(total / max(count, 1))
    model.eval()
    return curve


def pretrain(model: nnm.ResUnet, batch: TileBatch, cfg: TrainConfig) -> list:
    """Stage 1: all parameters trainable on the dense biased labels."""
    if cfg.loss == "mse":
        vals = batch.y[batch.mask]
        model.set_target_stats(vals.mean(), vals.std())
    mean, std = _input_stats(batch.x)
    model.set_input_stats(mean, std)
    return _train_loop(model, batch, cfg, trainable=None, freeze_policy=FREEZE_NONE)


def finetune(model: nnm.ResUnet, batch: TileBatch, cfg: TrainConfig) -> list:
    """Stage 2: only tensors admitted by the freeze policy are updated.

    Normalization statistics are kept from pre-training so the frozen
    features see the same input distribution.
    """
    trainable = apply_freeze(model, cfg.freeze_policy)
    return _train_loop(model, batch, cfg, trainable=trainable, freeze_policy=cfg.freeze_policy)


@dataclass
class SuiteConfig:
    clp: TrainConfig = field(default_factory=lambda: TrainConfig(loss="ce", batch_size=16))
    cth: TrainConfig = field(default_factory=lambda: TrainConfig(loss="mse", batch_size=8))
    cer: TrainConfig = field(default_factory=lambda: TrainConfig(loss="mse", batch_size=8))
    cot: TrainConfig = field(default_factory=lambda: TrainConfig(loss="mse", batch_size=8))
    infer_stride: int = tiles.DEFAULT_INFER_STRIDE
    blend: str = tiles.BLEND_UNIFORM


def _encode_clp_channel(clp_values: np.ndarray) -> np.ndarray:
    return clp_values.astype(np.float32) / 2.0


def predict_clp_full(model: nnm.ResUnet, stack_array: np.ndarray, stride: int, blend: str) -> np.ndarray:
    """Per-pixel class map via mosaicked class probabilities + argmax."""
    probs = _predict_full(model, stack_array, stride, blend, softmax=True)
    return probs.argmax(axis=0).astype(np.float64)


def _predict_full(model: nnm.ResUnet, stack_array: np.ndarray, stride: int, blend: str, softmax: bool) -> np.ndarray:
    model.eval()
    _, h, w = stack_array.shape
    plan = tiles.plan_tiles(h, w, stride=stride, blend=blend)
    outs = []
    with torch.no_grad():
        for spec in plan.specs:
            t = torch.as_tensor(tiles.extract_tile(stack_array, spec))[None]
            o = model(t)
            if softmax:
                o = torch.softmax(o, dim=1)
            outs.append(o[0].numpy().astype(np.float64))
    return tiles.mosaic(outs, plan)


def _scene_clp_channel(suite_clp: nnm.ResUnet, scene: Scene, stride: int, blend: str, teacher_forcing: bool) -> np.ndarray:
    if teacher_forcing:
        return _encode_clp_channel(scene.truth.clp.values)
    pred = predict_clp_full(suite_clp, scene.stack.to_array(), stride, blend)
    return _encode_clp_channel(pred)


def train_suite(dataset: list, cfg: SuiteConfig, stage: str = "both") -> tuple[ModelSuite, dict]:
    """Train CLP first (23 channels), then chain its predictions as channel 24
    into the three property models. `stage` in {"pretrain", "both"}."""
    curves = {}
    torch.manual_seed(cfg.clp.seed)  # model initialization must not depend on ambient RNG state
    clp_model = nnm.make_clp_model(scenegen.N_CHANNELS_BASE)
    src = build_samples(dataset, "source", "clp", cfg.clp)
    curves["clp_pretrain"] = pretrain(clp_model, src, cfg.clp)
    if stage == "both":
        tgt = build_samples(dataset, "target", "clp", cfg.clp)
        curves["clp_finetune"] = finetune(clp_model, tgt, cfg.clp)

    suite = ModelSuite(clp_model, None, None, None)
    clp_channels = {
        s.index: _scene_clp_channel(clp_model, s, cfg.infer_stride, cfg.blend, cfg.clp.teacher_forcing)
        for s in dataset
    }
    for var in ("cth", "cer", "cot"):
        var_cfg: TrainConfig = getattr(cfg, var)
        m = nnm.make_property_model(scenegen.N_CHANNELS_BASE + 1)
        src = build_samples(dataset, "source", var, var_cfg, clp_channels)
        curves[f"{var}_pretrain"] = pretrain(m, src, var_cfg)
        if stage == "both":
            tgt = build_samples(dataset, "target", var, var_cfg, clp_channels)
            curves[f"{var}_finetune"] = finetune(m, tgt, var_cfg)
        setattr(suite, var, m)
    return suite, curves


def finetune_suite(suite: ModelSuite, dataset: list, cfg: SuiteConfig) -> dict:
    """Stage 2 on an already pre-trained suite: fine-tune CLP, re-chain its
    predictions, fine-tune the property models."""
    curves = {}
    tgt = build_samples(dataset, "target", "clp", cfg.clp)
    curves["clp_finetune"] = finetune(suite.clp, tgt, cfg.clp)
    clp_channels = {
        s.index: _scene_clp_channel(suite.clp, s, cfg.infer_stride, cfg.blend, cfg.clp.teacher_forcing)
        for s in dataset
    }
    for var in ("cth", "cer", "cot"):
        var_cfg: TrainConfig = getattr(cfg, var)
        tgt = build_samples(dataset, "target", var, var_cfg, clp_channels)
        curves[f"{var}_finetune"] = finetune(getattr(suite, var), tgt, var_cfg)
    return curves


def predict_scene(suite: ModelSuite, stack: SceneStack, stride: int = tiles.DEFAULT_INFER_STRIDE, blend: str = tiles.BLEND_UNIFORM, log_cot: bool = True) -> tuple[LabelSet, float]:
    """Full-scene retrieval: CLP argmax, then masked CTH/CER/COT.

    Returns the label set and the pure-inference wall time in seconds.
    """
    if len(stack.channels) != scenegen.N_CHANNELS_BASE:
        raise ValueError("scene stack must have 23 channels")
    arr = stack.to_array()
    grid = stack.grid
    t0 = time.perf_counter()
    clp_map = predict_clp_full(suite.clp, arr, stride, blend)
    arr24 = np.concatenate([arr, _encode_clp_channel(clp_map)[None]], axis=0)
    if arr24.shape[0] != suite.cth.in_channels:
        raise ValueError("property models expect exactly 24 input channels")
    prop = {}
    for var in ("cth", "cer", "cot"):
        m: nnm.ResUnet = getattr(suite, var)
        out = _predict_full(m, arr24, stride, blend, softmax=False)[0]
        out = out * float(m.target_std.item()) + float(m.target_mean.item())
        if var == "cot" and log_cot:
            out = 10.0**out
        prop[var] = out
    elapsed = time.perf_counter() - t0

    cloudy = clp_map != CLP_CLEAR
    ones = np.ones(grid.shape, dtype=bool)
    return (
        LabelSet(
            clp=Raster(grid, clp_map, ones.copy()),
            cth=Raster(grid, np.where(cloudy, prop["cth"], 0.0), cloudy.copy()),
            cer=Raster(grid, np.where(cloudy, prop["cer"], 0.0), cloudy.copy()),
            cot=Raster(grid, np.where(cloudy, prop["cot"], 0.0), cloudy.copy()),
            coverage=Raster(grid, np.ones(grid.shape), ones.copy()),
        ),
        elapsed,
    )
