"""Seeded synthetic land-cover scenes with exact ground truth.

A scene is a Voronoi partition of the square into polygonal regions; each
region gets a class and is filled with that class's colour and texture.
Region-to-class assignment is greedy on the remaining class deficit, which
keeps every class close to its requested share.
"""

from __future__ import annotations

import numpy as np

from .raster import NUM_CLASSES, ClassMask, Raster

# mean RGB and texture per class id 1..5 (BuiltUp, Farmland, Forest, Meadow, Water)
_CLASS_LOOK = {
    1: ((170, 150, 150), "blocks"),
    2: ((120, 190, 70), "stripes"),
    3: ((30, 90, 40), "speckle"),
    4: ((200, 200, 90), "smooth"),
    5: ((40, 60, 150), "smooth"),
}


def _texture(kind: str, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "blocks":
        cells = rng.uniform(-25, 25, size=(size // 8 + 1, size // 8 + 1))
        return cells[yy // 8, xx // 8]
    if kind == "stripes":
        period = rng.uniform(6, 12)
        angle = rng.uniform(0, np.pi)
        phase = (xx * np.cos(angle) + yy * np.sin(angle)) / period
        return 18 * np.sign(np.sin(2 * np.pi * phase))
    if kind == "speckle":
        return rng.normal(0, 14, size=(size, size))
    return np.zeros((size, size))


def assign_classes(areas, proportions, rng) -> np.ndarray:
    """Class id (1-based) per region, largest regions first, by biggest deficit."""
    proportions = np.asarray(proportions, dtype=np.float64)
    proportions = proportions / proportions.sum()
    k = len(proportions)
    total = float(np.sum(areas))
    got = np.zeros(k)
    out = np.zeros(len(areas), dtype=np.int64)
    present = proportions > 0
    for rank, idx in enumerate(np.argsort(-np.asarray(areas), kind="stable")):
        deficit = proportions * total - got
        if rank < present.sum():
            # the first regions go to distinct classes so every class shows up
            deficit = np.where(got > 0, -np.inf, deficit)
        deficit = np.where(present, deficit, -np.inf)
        best = np.flatnonzero(deficit == deficit.max())
        c = int(best[rng.integers(len(best))])
        out[idx] = c + 1
        got[c] += areas[idx]
    return out


def generate_scene(rng: np.random.Generator, size: int = 256, region_scale: int = 96,
                   proportions=None, noise: float = 6.0) -> tuple[Raster, ClassMask]:
    proportions = np.ones(NUM_CLASSES) if proportions is None else np.asarray(proportions, float)
    k = len(proportions)
    n_regions = max(int((proportions > 0).sum()), int(round((size / region_scale) ** 2 * 1.5)))
    seeds = rng.uniform(0, size, size=(n_regions, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    region = np.argmin(d2, axis=-1)
    areas = np.bincount(region.ravel(), minlength=n_regions)
    region_class = assign_classes(areas, proportions, rng)
    labels = region_class[region].astype(np.uint8)

    img = np.zeros((size, size, 3))
    for c in range(1, k + 1):
        base, kind = _CLASS_LOOK.get(c, ((rng.integers(0, 256, 3)), "smooth"))
        sel = labels == c
        if not sel.any():
            continue
        tex = _texture(kind, size, rng)
        shade = rng.uniform(-12, 12)
        img[sel] = np.asarray(base, float) + shade + tex[sel][:, None]
    img += rng.normal(0, noise, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Raster(img), ClassMask(labels)


def generate_dataset(n_scenes: int, seed: int = 0, size: int = 256, region_scale: int = 96, proportions=None):
    """List of ``(scene_id, Raster, ClassMask)``; scene i uses its own child seed."""
    out = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        image, mask = generate_scene(rng, size, region_scale, proportions)
        out.append((f"scene{i:03d}", image, mask))
    return out
