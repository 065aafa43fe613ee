"""Tiling of samples larger than the chunk upper bound: an oversized sample
is split into a spatial grid of tiles, each stored as its own chunk."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


def plan_tile_shape(
    sample_shape: tuple[int, ...],
    itemsize: int,
    spatial_ndim: int,
    max_bytes: int,
) -> tuple[int, ...]:
    """Largest power-of-two hyper-rectangle along the spatial dims whose byte
    size fits max_bytes / 2; non-spatial trailing dims are kept whole."""
    budget = max_bytes // 2
    tile = []
    for i, d in enumerate(sample_shape):
        if i < spatial_ndim and d > 1:
            tile.append(1 << (d.bit_length() - 1))  # 2^floor(log2(d))
        else:
            tile.append(d)
    def nbytes(t):
        return int(np.prod(t)) * itemsize
    while nbytes(tile) > budget:
        spatial = [(t, i) for i, t in enumerate(tile[:spatial_ndim]) if t > 1]
        if not spatial:
            break
        _, i = max(spatial)
        tile[i] //= 2
    return tuple(tile)


def grid_shape(sample_shape: Sequence[int], tile_shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(math.ceil(d / t) if t else 1 for d, t in zip(sample_shape, tile_shape))


def tile_slices(
    sample_shape: Sequence[int],
    tile_shape: Sequence[int],
    cell: Sequence[int],
) -> tuple[slice, ...]:
    """Index slices of grid cell ``cell`` within the sample; edge tiles clip."""
    return tuple(
        slice(c * t, min((c + 1) * t, d))
        for d, t, c in zip(sample_shape, tile_shape, cell)
    )


def iter_cells(grid: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """Row-major traversal of the tile grid."""
    yield from np.ndindex(*grid)


def cell_ordinal(grid: Sequence[int], cell: Sequence[int]) -> int:
    ordinal = 0
    for g, c in zip(grid, cell):
        ordinal = ordinal * g + c
    return ordinal


def cells_intersecting(
    region: Sequence[tuple[int, int]],
    tile_shape: Sequence[int],
    grid: Sequence[int],
) -> list[tuple[int, ...]]:
    """Grid cells overlapping a per-dim [start, stop) region, row-major."""
    spans = []
    for (start, stop), t, g in zip(region, tile_shape, grid):
        lo = start // t
        hi = min((stop - 1) // t, g - 1) if stop > start else lo - 1
        spans.append(range(lo, hi + 1))
    out = []
    for cell in np.ndindex(*[len(s) for s in spans]):
        out.append(tuple(spans[i][c] for i, c in enumerate(cell)))
    return out


@dataclass
class TileEntry:
    sample_shape: tuple[int, ...]
    tile_shape: tuple[int, ...]
    grid: tuple[int, ...]
    chunks: list[str]  # tile chunk names in row-major grid order

    def to_dict(self) -> dict:
        return {
            "sample_shape": list(self.sample_shape),
            "tile_shape": list(self.tile_shape),
            "grid_shape": list(self.grid),
            "chunks": self.chunks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TileEntry":
        return cls(
            sample_shape=tuple(d["sample_shape"]),
            tile_shape=tuple(d["tile_shape"]),
            grid=tuple(d["grid_shape"]),
            chunks=list(d["chunks"]),
        )


class TileMap:
    """global sample index -> tile grid entry, for tiled (oversized) samples."""

    def __init__(self, entries: dict[int, TileEntry] | None = None):
        self.entries: dict[int, TileEntry] = entries or {}

    def __contains__(self, global_index: int) -> bool:
        return global_index in self.entries

    def __getitem__(self, global_index: int) -> TileEntry:
        return self.entries[global_index]

    def set(self, global_index: int, entry: TileEntry) -> None:
        self.entries[global_index] = entry

    def remove(self, global_index: int) -> None:
        self.entries.pop(global_index, None)

    def copy(self) -> "TileMap":
        return TileMap(dict(self.entries))

    def serialize(self) -> bytes:
        return json.dumps(
            {str(i): e.to_dict() for i, e in sorted(self.entries.items())},
            indent=2,
            sort_keys=True,
        ).encode("utf-8")

    @classmethod
    def deserialize(cls, data: bytes) -> "TileMap":
        raw = json.loads(data.decode("utf-8"))
        return cls({int(k): TileEntry.from_dict(v) for k, v in raw.items()})
