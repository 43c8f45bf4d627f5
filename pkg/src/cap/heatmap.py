"""Anomaly-region maps from a spatial feature grid and a (z, zn) pair.

The query vector and its normal representation are each compared against
every cell of the backbone's spatial feature map by cosine similarity;
the absolute difference of the two similarity grids marks regions where
the sample deviates from normality. The small grid is differenced first,
then upsampled with corner-aligned bilinear interpolation (a linear
operation, so anchor values match either order of operations).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, Sequence

import numpy as np

from . import fileio
from .bank import MIN_NORM
from .errors import DataError, FormatError

log = logging.getLogger(__name__)

SMAP_MAGIC = b"CAPSMAP1"
SMAP_VERSION = 1


@dataclass(frozen=True)
class SpatialFeatureMap:
    """H x W grid of D-dimensional feature cells for one sample."""

    grid: np.ndarray  # (H, W, D) float64
    source_id: Any = None


@dataclass(frozen=True)
class HeatmapResult:
    raw_grid: np.ndarray  # (H, W) absolute similarity difference
    upsampled: np.ndarray  # (target_h, target_w)
    vmin: float
    vmax: float


def _check_map(smap: SpatialFeatureMap) -> np.ndarray:
    grid = np.asarray(smap.grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise DataError(f"spatial map must be H x W x D, got shape {grid.shape}")
    if not np.isfinite(grid).all():
        raise DataError("spatial map has non-finite entries")
    return grid


def similarity_map(vector: np.ndarray, smap: SpatialFeatureMap) -> np.ndarray:
    """Cosine similarity of the vector against every grid cell.

    Zero-norm cells produce 0 and are flagged; a zero-norm vector is an
    error.
    """
    grid = _check_map(smap)
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (grid.shape[2],):
        raise DataError(f"vector shape {v.shape} does not match cell dim {grid.shape[2]}")
    v_norm = float(np.linalg.norm(v))
    if v_norm <= MIN_NORM:
        raise DataError("vector has near-zero norm")
    cell_norms = np.linalg.norm(grid, axis=2)
    degenerate = cell_norms <= MIN_NORM
    if degenerate.any():
        log.warning("%d zero-norm cells produce similarity 0", int(degenerate.sum()))
    safe = np.maximum(cell_norms, MIN_NORM)
    sims = (grid @ v) / (safe * v_norm)
    sims[degenerate] = 0.0
    return np.clip(sims, -1.0, 1.0)


def bilinear_upsample(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation to a larger grid.

    The four corners reproduce exactly; a size-1 axis broadcasts its
    single value.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataError(f"grid must be 2-D, got shape {grid.shape}")
    h, w = grid.shape
    if target_h < h or target_w < w:
        raise DataError(
            f"target {target_h}x{target_w} is smaller than source {h}x{w}"
        )
    ys = np.linspace(0.0, h - 1.0, target_h) if h > 1 else np.zeros(target_h)
    xs = np.linspace(0.0, w - 1.0, target_w) if w > 1 else np.zeros(target_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bottom = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def anomaly_heatmap(
    z: np.ndarray,
    z_normal: np.ndarray,
    smap: SpatialFeatureMap,
    target_h: int,
    target_w: int,
) -> HeatmapResult:
    """Absolute difference of the two similarity grids, then upsample."""
    raw = np.abs(similarity_map(z, smap) - similarity_map(z_normal, smap))
    upsampled = bilinear_upsample(raw, target_h, target_w)
    return HeatmapResult(
        raw_grid=raw,
        upsampled=upsampled,
        vmin=float(raw.min()),
        vmax=float(raw.max()),
    )


def save_spatial_maps(
    maps: Sequence[SpatialFeatureMap], destination: str | Path | BinaryIO
) -> None:
    """Write same-shaped spatial maps in the versioned container format."""
    if not maps:
        raise DataError("need at least one spatial map")
    grids = [_check_map(m) for m in maps]
    shape = grids[0].shape
    for i, grid in enumerate(grids):
        if grid.shape != shape:
            raise DataError(f"map {i} shape {grid.shape} differs from {shape}")
    meta = {"ids": [m.source_id for m in maps]}
    with fileio.open_binary(destination, "wb") as fh:
        fh.write(SMAP_MAGIC)
        fileio.write_u32(fh, SMAP_VERSION)
        fileio.write_u64(fh, len(grids))
        fileio.write_u64(fh, shape[0])
        fileio.write_u64(fh, shape[1])
        fileio.write_u64(fh, shape[2])
        for grid in grids:
            fileio.write_f32_array(fh, grid)
        fileio.write_metadata(fh, meta)


def load_spatial_maps(source: str | Path | BinaryIO) -> list[SpatialFeatureMap]:
    """Read a spatial-map file, rejecting unknown versions and truncation."""
    with fileio.open_binary(source, "rb") as fh:
        fileio.check_magic(fh, SMAP_MAGIC)
        fileio.check_version(fh, SMAP_VERSION)
        count = fileio.read_u64(fh, "map count")
        h = fileio.read_u64(fh, "map height")
        w = fileio.read_u64(fh, "map width")
        d = fileio.read_u64(fh, "map depth")
        grids = [
            fileio.read_f32_array(fh, (h, w, d), f"map {i} payload").astype(np.float64)
            for i in range(count)
        ]
        meta = fileio.read_metadata(fh)
        fileio.check_eof(fh)
    ids = meta.get("ids")
    if ids is not None and len(ids) != count:
        raise FormatError(f"metadata has {len(ids)} ids for {count} maps")
    return [
        SpatialFeatureMap(grid=grid, source_id=ids[i] if ids else i)
        for i, grid in enumerate(grids)
    ]


def write_pgm(
    grid: np.ndarray,
    destination: str | Path | BinaryIO,
    vmin: float | None = None,
    vmax: float | None = None,
) -> None:
    """Render a 2-D grid as an 8-bit binary portable graymap (P5).

    Values map linearly from [vmin, vmax] to [0, 255]; a flat grid
    renders as black.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataError(f"grid must be 2-D, got shape {grid.shape}")
    lo = float(grid.min()) if vmin is None else float(vmin)
    hi = float(grid.max()) if vmax is None else float(vmax)
    if hi > lo:
        scaled = (np.clip(grid, lo, hi) - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(grid)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    with fileio.open_binary(destination, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())


def write_grid_csv(grid: np.ndarray, destination: str | Path) -> None:
    """Raw comma-separated values, one text row per grid row."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataError(f"grid must be 2-D, got shape {grid.shape}")
    lines = [",".join(f"{value:.12g}" for value in row) for row in grid]
    Path(destination).write_text("\n".join(lines) + "\n", encoding="utf-8")
