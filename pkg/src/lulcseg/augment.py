"""Dihedral augmentation of (image, mask) pairs.

Rotations are anti-clockwise. Every op acts on the first two axes of an
array, so the same map is applied to an ``(H, W, C)`` image and its
``(H, W)`` mask.
"""

from __future__ import annotations

import enum

import numpy as np

from .raster import ClassMask, Raster


class AugmentOp(enum.Enum):
    Identity = 0
    FlipH = 1
    FlipV = 2
    Rot90 = 3
    Rot180 = 4
    Rot270 = 5
    Transpose = 6
    AntiTranspose = 7

    @property
    def needs_square(self) -> bool:
        return self in (AugmentOp.Rot90, AugmentOp.Rot270, AugmentOp.Transpose, AugmentOp.AntiTranspose)


def transform(op: AugmentOp, a: np.ndarray) -> np.ndarray:
    if op is AugmentOp.Identity:
        out = a
    elif op is AugmentOp.FlipH:
        out = a[:, ::-1]
    elif op is AugmentOp.FlipV:
        out = a[::-1]
    elif op is AugmentOp.Rot90:
        out = np.rot90(a, 1)
    elif op is AugmentOp.Rot180:
        out = np.rot90(a, 2)
    elif op is AugmentOp.Rot270:
        out = np.rot90(a, 3)
    elif op is AugmentOp.Transpose:
        out = np.swapaxes(a, 0, 1)
    else:
        out = np.rot90(np.swapaxes(a, 0, 1), 2)
    return np.ascontiguousarray(out)


# "standard": the original plus both flips and the three anti-clockwise rotations
AUGMENT_SETS = {
    "standard": (AugmentOp.Identity, AugmentOp.FlipV, AugmentOp.FlipH, AugmentOp.Rot90, AugmentOp.Rot180, AugmentOp.Rot270),
    "d4": tuple(AugmentOp),
    "identity": (AugmentOp.Identity,),
}


def parse_augment_set(spec: str) -> tuple:
    """A named set or a comma list of op names; Identity is forced first."""
    if spec in AUGMENT_SETS:
        return AUGMENT_SETS[spec]
    try:
        ops = [AugmentOp[name.strip()] for name in spec.split(",") if name.strip()]
    except KeyError as exc:
        raise ValueError(f"unknown augmentation op {exc.args[0]!r}") from None
    return make_augment_set(ops)


def make_augment_set(ops) -> tuple:
    ops = list(ops)
    if not ops:
        raise ValueError("augment set must not be empty")
    if len(set(ops)) != len(ops):
        raise ValueError("augment set contains duplicates")
    if AugmentOp.Identity in ops:
        ops.remove(AugmentOp.Identity)
    return (AugmentOp.Identity, *ops)


def apply(op: AugmentOp, image: Raster, mask: ClassMask) -> tuple[Raster, ClassMask]:
    if (image.height, image.width) != (mask.height, mask.width):
        raise ValueError(
            f"image {image.width}x{image.height} and mask {mask.width}x{mask.height} differ in size"
        )
    if op.needs_square and image.height != image.width:
        raise ValueError(f"{op.name} needs a square input, got {image.width}x{image.height}")
    return Raster(transform(op, image.data)), ClassMask(transform(op, mask.labels))


def expand_dataset(pairs, ops) -> list:
    """Every pair under every op: pair 0 with all ops, then pair 1, and so on."""
    ops = tuple(ops)
    if not ops:
        raise ValueError("augment set must not be empty")
    return [apply(op, image, mask) for image, mask in pairs for op in ops]
