"""Rasters, class masks, and the colour palette that links them.

A :class:`Raster` is an 8-bit ``(height, width, channels)`` image; a
:class:`ClassMask` is a ``(height, width)`` plane of class ids where 0 means
Unrecognized. Both wrap read-only numpy arrays.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

NUM_CLASSES = 5


class RasterError(Exception):
    """Base class for raster I/O and codec failures."""


class UnsupportedFormatError(RasterError):
    pass


class CorruptRasterError(RasterError):
    pass


class PaletteError(RasterError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Raster:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3, 4):
            raise ValueError(f"raster data must be (H, W, 1|3|4), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        if data.dtype != np.uint8:
            raise ValueError(f"raster data must be uint8, got {data.dtype}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, Raster) and np.array_equal(self.data, other.data)

    def to_rgb(self) -> "Raster":
        """Drop alpha / near-infrared band or replicate a grey band to RGB."""
        if self.channels == 3:
            return self
        if self.channels == 1:
            return Raster(np.repeat(self.data, 3, axis=2))
        return Raster(self.data[:, :, :3])


@dataclass(frozen=True, eq=False)
class ClassMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise ValueError(f"mask labels must be a non-empty 2-D array, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("mask labels must fit in uint8")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8, copy=False)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        return isinstance(other, ClassMask) and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class Palette:
    """Ordered (name, rgb) entries; entry 0 is always Unrecognized/black."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((str(name), tuple(int(v) for v in rgb)) for name, rgb in self.entries)
        if not entries or entries[0][1] != (0, 0, 0):
            raise PaletteError("palette entry 0 must be black (0,0,0)")
        for name, rgb in entries:
            if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
                raise PaletteError(f"bad colour {rgb} for {name!r}")
        if len({rgb for _, rgb in entries}) != len(entries):
            raise PaletteError("palette colours must be distinct")
        if len({name for name, _ in entries}) != len(entries):
            raise PaletteError("palette class names must be distinct")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    @property
    def colors(self) -> np.ndarray:
        return np.array([rgb for _, rgb in self.entries], dtype=np.uint8)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_file(cls, path) -> "Palette":
        """Read ``name = R,G,B`` lines (``#`` comments allowed), in file order."""
        from .config import read_keyvalue

        entries = []
        for name, value in read_keyvalue(path).items():
            try:
                rgb = tuple(int(v) for v in value.split(","))
            except ValueError:
                raise PaletteError(f"{path}: cannot parse colour {value!r} for {name!r}") from None
            entries.append((name, rgb))
        return cls(tuple(entries))

    def to_file(self, path):
        lines = [f"{name} = {r},{g},{b}" for name, (r, g, b) in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")


DEFAULT_PALETTE = Palette((
    ("Unrecognized", (0, 0, 0)),
    ("BuiltUp", (255, 0, 0)),
    ("Farmland", (0, 255, 0)),
    ("Forest", (0, 255, 255)),
    ("Meadow", (255, 255, 0)),
    ("Water", (0, 0, 255)),
))

_SUPPORTED = {".png": "PNG", ".tif": "TIFF", ".tiff": "TIFF"}


def load_raster(path) -> Raster:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such raster: {path}")
    if path.suffix.lower() not in _SUPPORTED:
        raise UnsupportedFormatError(f"{path}: unsupported raster format {path.suffix!r}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "TIFF"):
                raise UnsupportedFormatError(f"{path}: unsupported raster format {im.format}")
            if im.mode not in ("L", "RGB", "RGBA", "P"):
                raise UnsupportedFormatError(f"{path}: unsupported pixel mode {im.mode} (8-bit only)")
            if im.mode == "P":
                im = im.convert("RGB")
            data = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise CorruptRasterError(f"{path}: cannot decode image") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptRasterError(f"{path}: corrupt image stream ({exc})") from exc
    return Raster(data)


def save_raster(r: Raster, path) -> None:
    path = Path(path)
    fmt = _SUPPORTED.get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormatError(f"{path}: unsupported raster format {path.suffix!r}")
    data = r.data[:, :, 0] if r.channels == 1 else r.data
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(data).save(tmp, format=fmt)
    os.replace(tmp, path)


def decode_mask(r: Raster, palette: Palette = DEFAULT_PALETTE, strict: bool = True) -> ClassMask:
    """Map each pixel's exact RGB to its palette index.

    Unknown colours raise :class:`PaletteError` in strict mode and become
    Unrecognized (0) otherwise.
    """
    if r.channels != 3:
        raise ValueError(f"decode_mask needs a 3-channel raster, got {r.channels}")
    d = r.data.astype(np.uint32)
    keys = (d[:, :, 0] << 16) | (d[:, :, 1] << 8) | d[:, :, 2]
    colors = palette.colors.astype(np.uint32)
    pal_keys = (colors[:, 0] << 16) | (colors[:, 1] << 8) | colors[:, 2]
    order = np.argsort(pal_keys)
    sorted_keys = pal_keys[order]
    pos = np.clip(np.searchsorted(sorted_keys, keys), 0, len(sorted_keys) - 1)
    found = sorted_keys[pos] == keys
    if strict and not found.all():
        y, x = (int(v) for v in np.argwhere(~found)[0])
        raise PaletteError(f"unknown colour {tuple(int(v) for v in r.data[y, x])} at pixel (x={x}, y={y})")
    labels = np.where(found, order[pos], 0)
    return ClassMask(labels.astype(np.uint8))


def encode_mask(m: ClassMask, palette: Palette = DEFAULT_PALETTE) -> Raster:
    if m.labels.max() >= len(palette):
        raise PaletteError(f"label {int(m.labels.max())} has no palette colour (palette size {len(palette)})")
    return Raster(palette.colors[m.labels])
