"""64x64 tile extraction and mosaic reconstruction.

Tiles are laid out on a stride lattice, clamped so the last tile ends at
the image edge; borders are reflect-padded. Mosaic recombines overlapping
tiles by uniform averaging (default) or by keeping each tile's central
window (center-crop mode), in a fixed tile order so results are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TILE_SIZE = 64
DEFAULT_TRAIN_STRIDE = 64
DEFAULT_INFER_STRIDE = 48
DEFAULT_CROP_MARGIN = 8

BLEND_UNIFORM = "uniform"
BLEND_CENTER_CROP = "center_crop"


@dataclass(frozen=True)
class TileSpec:
    row0: int
    col0: int
    size: int = DEFAULT_TILE_SIZE


@dataclass
class TilePlan:
    nrows: int
    ncols: int
    size: int
    stride: int
    blend: str = BLEND_UNIFORM
    crop_margin: int = DEFAULT_CROP_MARGIN
    specs: list = field(default_factory=list)


def _offsets(extent: int, size: int, stride: int) -> list:
    """Start offsets covering [0, extent); last tile clamped to the end."""
    if extent <= size:
        return [0]
    offs = list(range(0, extent - size, stride))
    offs.append(extent - size)
    return offs


def plan_tiles(
    nrows: int,
    ncols: int,
    size: int = DEFAULT_TILE_SIZE,
    stride: int | None = None,
    blend: str = BLEND_UNIFORM,
    crop_margin: int = DEFAULT_CROP_MARGIN,
) -> TilePlan:
    if size < 8:
        raise ValueError("tile size must be at least 8")
    stride = size if stride is None else stride
    if not (1 <= stride <= size):
        raise ValueError("stride must be in [1, size]")
    if blend not in (BLEND_UNIFORM, BLEND_CENTER_CROP):
        raise ValueError(f"unknown blend mode {blend!r}")
    specs = [
        TileSpec(r0, c0, size)
        for r0 in _offsets(nrows, size, stride)
        for c0 in _offsets(ncols, size, stride)
    ]
    return TilePlan(nrows, ncols, size, stride, blend, crop_margin, specs)


def extract_tile(array: np.ndarray, spec: TileSpec) -> np.ndarray:
    """Channel-major [C, size, size] crop with reflect padding at edges."""
    if array.ndim == 2:
        array = array[None]
    _, h, w = array.shape
    pad_r = max(0, spec.row0 + spec.size - h)
    pad_c = max(0, spec.col0 + spec.size - w)
    if pad_r or pad_c:
        array = np.pad(array, ((0, 0), (0, pad_r), (0, pad_c)), mode="reflect")
    return array[:, spec.row0 : spec.row0 + spec.size, spec.col0 : spec.col0 + spec.size].copy()


def extract_tiles(array: np.ndarray, plan: TilePlan) -> list:
    return [extract_tile(array, spec) for spec in plan.specs]


def mosaic(tiles: list, plan: TilePlan) -> np.ndarray:
    """Reassemble per-tile outputs into the full [C, nrows, ncols] image."""
    if len(tiles) != len(plan.specs):
        raise ValueError(f"got {len(tiles)} tiles for {len(plan.specs)} specs")
    tiles = [t[None] if t.ndim == 2 else t for t in tiles]
    nch = tiles[0].shape[0]
    acc = np.zeros((nch, plan.nrows, plan.ncols), dtype=np.float64)
    weight = np.zeros((plan.nrows, plan.ncols), dtype=np.float64)

    m = plan.crop_margin if plan.blend == BLEND_CENTER_CROP else 0
    for tile, spec in zip(tiles, plan.specs):
        if tile.shape[1:] != (plan.size, plan.size):
            raise ValueError(f"tile shape {tile.shape} does not match plan size {plan.size}")
        r0, c0 = spec.row0, spec.col0
        # window inside the tile after discarding the crop margin, except
        # where the margin would lose image-edge pixels
        tr0 = m if r0 > 0 else 0
        tc0 = m if c0 > 0 else 0
        tr1 = plan.size - m if r0 + plan.size < plan.nrows else min(plan.size, plan.nrows - r0)
        tc1 = plan.size - m if c0 + plan.size < plan.ncols else min(plan.size, plan.ncols - c0)
        rr0, rr1 = r0 + tr0, r0 + tr1
        cc0, cc1 = c0 + tc0, c0 + tc1
        if rr1 <= rr0 or cc1 <= cc0:
            continue
        acc[:, rr0:rr1, cc0:cc1] += tile[:, tr0:tr1, tc0:tc1]
        weight[rr0:rr1, cc0:cc1] += 1.0

    if np.any(weight == 0):
        raise ValueError("tile plan does not cover every pixel")
    return acc / weight[None]
