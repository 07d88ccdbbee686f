import itertools

import numpy as np
import pytest

from lulcseg.augment import (AUGMENT_SETS, AugmentOp, apply, expand_dataset, make_augment_set, parse_augment_set,
                             transform)
from lulcseg.raster import ClassMask, Raster, decode_mask, encode_mask

Op = AugmentOp


def random_pair(rng, size=16):
    return (Raster(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)),
            ClassMask(rng.integers(0, 6, (size, size))))


def coordinate_map(op, a):
    """Reference: out[y, x] = a[src(y, x)] written as explicit index maps."""
    h, w = a.shape[:2]
    oh, ow = (w, h) if op.needs_square else (h, w)
    out = np.empty((oh, ow) + a.shape[2:], a.dtype)
    for y in range(oh):
        for x in range(ow):
            src = {
                Op.Identity: (y, x),
                Op.FlipH: (y, w - 1 - x),
                Op.FlipV: (h - 1 - y, x),
                Op.Rot90: (x, w - 1 - y),
                Op.Rot180: (h - 1 - y, w - 1 - x),
                Op.Rot270: (h - 1 - x, y),
                Op.Transpose: (x, y),
                Op.AntiTranspose: (h - 1 - x, w - 1 - y),
            }[op]
            out[y, x] = a[src]
    return out


def test_rot90_2x2():
    m = np.array([["a", "b"], ["c", "d"]])
    assert transform(Op.Rot90, m).tolist() == [["b", "d"], ["a", "c"]]


@pytest.mark.parametrize("op", list(Op))
def test_ops_match_coordinate_map(op):
    a = np.random.default_rng(op.value).integers(0, 100, (5, 5, 2))
    np.testing.assert_array_equal(transform(op, a), coordinate_map(op, a))


def test_identity_and_involutions():
    rng = np.random.default_rng(0)
    img, m = random_pair(rng)
    assert apply(Op.Identity, img, m) == (img, m)
    assert apply(Op.FlipH, *apply(Op.FlipH, img, m)) == (img, m)


def test_d4_closure():
    a = np.arange(9).reshape(3, 3)
    images = {op: transform(op, a).tobytes() for op in Op}
    assert len(set(images.values())) == 8
    for f, g in itertools.product(Op, Op):
        assert transform(f, transform(g, a)).tobytes() in images.values()


def test_label_multiset_preserved():
    rng = np.random.default_rng(1)
    img, m = random_pair(rng)
    for op in Op:
        _, m2 = apply(op, img, m)
        assert np.array_equal(np.bincount(m2.labels.ravel(), minlength=6), np.bincount(m.labels.ravel(), minlength=6))


def test_commutes_with_palette_codec():
    rng = np.random.default_rng(2)
    for op in Op:
        m = ClassMask(rng.integers(0, 6, (8, 8)))
        enc = encode_mask(m)
        img_aug, _ = apply(op, enc, m)
        assert decode_mask(img_aug) == apply(op, enc, m)[1]


def test_apply_errors():
    img = Raster(np.zeros((4, 6, 3), np.uint8))
    with pytest.raises(ValueError):
        apply(Op.FlipH, img, ClassMask(np.zeros((6, 4), np.uint8)))
    with pytest.raises(ValueError):
        apply(Op.Rot90, img, ClassMask(np.zeros((4, 6), np.uint8)))
    a, b = apply(Op.Rot180, img, ClassMask(np.zeros((4, 6), np.uint8)))
    assert (a.width, a.height) == (6, 4)


def test_default_set_is_six_listed_transforms():
    ops = AUGMENT_SETS["standard"]
    assert ops[0] is Op.Identity and len(ops) == 6
    assert set(ops) == {Op.Identity, Op.FlipH, Op.FlipV, Op.Rot90, Op.Rot180, Op.Rot270}
    rng = np.random.default_rng(3)
    assert len(expand_dataset([random_pair(rng)], ops)) == 6


def test_identity_set_is_passthrough():
    rng = np.random.default_rng(4)
    pairs = [random_pair(rng) for _ in range(4)]
    assert expand_dataset(pairs, AUGMENT_SETS["identity"]) == pairs


def test_full_d4_expansion_distinct_and_ordered():
    rng = np.random.default_rng(5)
    pairs = [random_pair(rng) for _ in range(3)]
    out = expand_dataset(pairs, AUGMENT_SETS["d4"])
    assert len(out) == 24
    assert len({img.data.tobytes() for img, _ in out}) == 24
    for i, (img, m) in enumerate(out):
        op = AUGMENT_SETS["d4"][i % 8]
        assert (img, m) == apply(op, *pairs[i // 8])


def test_set_construction():
    assert make_augment_set([Op.Rot90, Op.Identity]) == (Op.Identity, Op.Rot90)
    assert parse_augment_set("FlipH,Rot90") == (Op.Identity, Op.FlipH, Op.Rot90)
    with pytest.raises(ValueError):
        make_augment_set([])
    with pytest.raises(ValueError):
        make_augment_set([Op.FlipH, Op.FlipH])
    with pytest.raises(ValueError):
        parse_augment_set("Shear")
    with pytest.raises(ValueError):
        expand_dataset([], ())
