from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    entry_gauss: np.ndarray  # (E,) gaussian index per tile-list entry
    tile_ranges: np.ndarray  # (tiles_x * tiles_y, 2) [start, end) into entry_gauss

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        start, end = self.tile_ranges[ty * self.tiles_x + tx]
        return self.entry_gauss[start:end]

    @property
    def n_entries(self) -> int:
        return len(self.entry_gauss)


def pixel_span(center, radius, size):
    """Inclusive range of pixel indices whose centers lie within ``radius`` of ``center``."""
    lo = np.maximum(np.ceil(center - radius), 0).astype(np.int64)
    hi = np.minimum(np.floor(center + radius), size - 1).astype(np.int64)
    return lo, hi


def bin_tiles(mean2d, radius, depth, visible, width, height, tile_size=16) -> TileGrid:
    """Duplicate every retained splat into each tile its footprint square overlaps.

    Within a tile, entries are sorted by (depth, gaussian index).
    """
    mean2d = np.asarray(mean2d, dtype=np.float64)
    radius = np.asarray(radius, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    x_lo, x_hi = pixel_span(mean2d[:, 0], radius, width)
    y_lo, y_hi = pixel_span(mean2d[:, 1], radius, height)
    keep = visible & (radius > 0) & (x_lo <= x_hi) & (y_lo <= y_hi)
    idx = np.nonzero(keep)[0]
    tx0, tx1 = x_lo[idx] // tile_size, x_hi[idx] // tile_size
    ty0, ty1 = y_lo[idx] // tile_size, y_hi[idx] // tile_size
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    # position of each duplicate within its splat's rectangle
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[owner] + local % nx[owner]
    tile_y = ty0[owner] + local // nx[owner]
    tile_id = tile_y * tiles_x + tile_x
    gauss = idx[owner]
    order = np.lexsort((gauss, depth[gauss], tile_id))
    entry_gauss = gauss[order].astype(np.int64)
    tile_sorted = tile_id[order]
    n_tiles = tiles_x * tiles_y
    starts = np.searchsorted(tile_sorted, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_sorted, np.arange(n_tiles), side="right")
    return TileGrid(tile_size, tiles_x, tiles_y, entry_gauss, np.stack([starts, ends], 1).astype(np.int64))
