"""Non-overlapping square tiling of large scenes and stitching back.

By default the right and bottom remainder strips that do not fit a whole
tile are dropped, so a 7168x6720 scene with 512-pixel tiles gives
14 x 13 = 182 tiles and loses a 64-pixel strip at the bottom. ``anchor``
mode instead re-anchors the last column/row against the image edge; those
tiles overlap their neighbours, and stitching lets the later tile win.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .raster import ClassMask, Raster

DROP = "drop"
ANCHOR = "anchor"


@dataclass(frozen=True)
class TileRef:
    row: int
    col: int
    x0: int
    y0: int
    size: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.size), slice(self.x0, self.x0 + self.size)


@dataclass(frozen=True)
class TileGrid:
    source_width: int
    source_height: int
    tile_size: int
    cols: int
    rows: int
    mode: str = DROP

    @property
    def covered_width(self) -> int:
        return self.source_width if self.mode == ANCHOR else self.cols * self.tile_size

    @property
    def covered_height(self) -> int:
        return self.source_height if self.mode == ANCHOR else self.rows * self.tile_size

    @property
    def dropped_right(self) -> int:
        return self.source_width - self.covered_width

    @property
    def dropped_bottom(self) -> int:
        return self.source_height - self.covered_height

    def __len__(self):
        return self.cols * self.rows

    def _origin(self, index: int, count: int, extent: int) -> int:
        if self.mode == ANCHOR and index == count - 1:
            return extent - self.tile_size
        return index * self.tile_size

    def ref(self, row: int, col: int) -> TileRef:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"tile (r{row}, c{col}) outside a {self.rows}x{self.cols} grid")
        return TileRef(row, col, self._origin(col, self.cols, self.source_width),
                       self._origin(row, self.rows, self.source_height), self.tile_size)

    def refs(self) -> list[TileRef]:
        """All tiles in row-major order from the top-left."""
        return [self.ref(r, c) for r in range(self.rows) for c in range(self.cols)]

    def to_manifest(self, **extra) -> dict:
        d = asdict(self)
        d.update(covered_width=self.covered_width, covered_height=self.covered_height,
                 dropped_right=self.dropped_right, dropped_bottom=self.dropped_bottom, tiles=len(self))
        d.update(extra)
        return d

    @classmethod
    def from_manifest(cls, d: dict) -> "TileGrid":
        return cls(d["source_width"], d["source_height"], d["tile_size"], d["cols"], d["rows"], d.get("mode", DROP))


def plan_grid(source_width: int, source_height: int, tile_size: int, mode: str = DROP) -> TileGrid:
    if tile_size < 1:
        raise ValueError("tile_size must be at least 1")
    if tile_size > source_width or tile_size > source_height:
        raise ValueError(f"tile size {tile_size} exceeds source {source_width}x{source_height}")
    if mode == DROP:
        cols, rows = source_width // tile_size, source_height // tile_size
    elif mode == ANCHOR:
        cols, rows = -(-source_width // tile_size), -(-source_height // tile_size)
    else:
        raise ValueError(f"unknown tiling mode {mode!r}")
    return TileGrid(source_width, source_height, tile_size, cols, rows, mode)


def _array(obj) -> np.ndarray:
    if isinstance(obj, Raster):
        return obj.data
    if isinstance(obj, ClassMask):
        return obj.labels
    return np.asarray(obj)


def _wrap(arr, like):
    if isinstance(like, Raster):
        return Raster(arr)
    if isinstance(like, ClassMask):
        return ClassMask(arr)
    return arr


def extract_tiles(source, grid: TileGrid) -> list:
    """Tiles of a Raster, ClassMask or plain array, in row-major order."""
    arr = _array(source)
    if arr.shape[:2] != (grid.source_height, grid.source_width):
        raise ValueError(
            f"source is {arr.shape[1]}x{arr.shape[0]}, grid expects {grid.source_width}x{grid.source_height}"
        )
    return [_wrap(arr[ref.slices].copy(), source) for ref in grid.refs()]


def stitch(tiles, grid: TileGrid, full_canvas: bool = False):
    """Assemble row-major ``tiles`` into a mosaic.

    The mosaic spans the covered region, or the whole source when
    ``full_canvas`` is set, in which case dropped margins stay zero
    (Unrecognized / black).
    """
    tiles = list(tiles)
    if len(tiles) != len(grid):
        raise ValueError(f"expected {len(grid)} tiles, got {len(tiles)}")
    arrays = [_array(t) for t in tiles]
    first = arrays[0]
    for a in arrays:
        if a.shape[:2] != (grid.tile_size, grid.tile_size) or a.shape[2:] != first.shape[2:]:
            raise ValueError(f"tile shape {a.shape} does not match tile size {grid.tile_size}")
    h, w = (grid.source_height, grid.source_width) if full_canvas else (grid.covered_height, grid.covered_width)
    canvas = np.zeros((h, w) + first.shape[2:], dtype=first.dtype)
    for ref, a in zip(grid.refs(), arrays):
        canvas[ref.slices] = a
    return _wrap(canvas, tiles[0])


def stitch_named(named_tiles: dict, grid: TileGrid, full_canvas: bool = False):
    """Stitch tiles keyed by ``(row, col)``; insertion order does not matter."""
    missing = [(r.row, r.col) for r in grid.refs() if (r.row, r.col) not in named_tiles]
    if missing:
        raise ValueError(f"missing tiles {missing[:5]}")
    return stitch([named_tiles[(r.row, r.col)] for r in grid.refs()], grid, full_canvas)


_TILE_NAME = re.compile(r"^(?P<scene>.+)_r(?P<row>\d+)_c(?P<col>\d+)$")


def tile_name(scene: str, ref: TileRef) -> str:
    return f"{scene}_r{ref.row}_c{ref.col}"


def parse_tile_name(stem: str) -> tuple[str, int, int]:
    m = _TILE_NAME.match(stem)
    if not m:
        raise ValueError(f"not a tile name: {stem!r}")
    return m["scene"], int(m["row"]), int(m["col"])


def write_manifest(path, grid: TileGrid, **extra):
    Path(path).write_text(json.dumps(grid.to_manifest(**extra), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[TileGrid, dict]:
    d = json.loads(Path(path).read_text())
    return TileGrid.from_manifest(d), d
