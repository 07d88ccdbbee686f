import numpy as np
import pytest
from PIL import Image

from lulcseg.raster import (DEFAULT_PALETTE, ClassMask, CorruptRasterError, Palette, PaletteError, Raster,
                            UnsupportedFormatError, decode_mask, encode_mask, load_raster, save_raster)


def test_raster_invariants():
    r = Raster(np.zeros((4, 6, 3), np.uint8))
    assert (r.width, r.height, r.channels) == (6, 4, 3)
    assert r.data.size == r.width * r.height * r.channels
    with pytest.raises(ValueError):
        Raster(np.zeros((0, 3, 3), np.uint8))
    with pytest.raises(ValueError):
        Raster(np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ValueError):
        Raster(np.zeros((2, 2, 3), np.float32))


def test_raster_is_read_only():
    r = Raster(np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(ValueError):
        r.data[0, 0, 0] = 1


def test_to_rgb_drops_fourth_band():
    d = np.random.default_rng(0).integers(0, 256, (3, 3, 4), dtype=np.uint8)
    np.testing.assert_array_equal(Raster(d).to_rgb().data, d[:, :, :3])


def test_load_512_png(tmp_path):
    Image.fromarray(np.zeros((512, 512, 3), np.uint8)).save(tmp_path / "a.png")
    r = load_raster(tmp_path / "a.png")
    assert (r.width, r.height, r.channels) == (512, 512, 3)


def test_load_1x1_black(tmp_path):
    Image.fromarray(np.zeros((1, 1, 3), np.uint8)).save(tmp_path / "a.png")
    r = load_raster(tmp_path / "a.png")
    assert (r.width, r.height, r.channels) == (1, 1, 3)
    assert r.data.tobytes() == b"\x00\x00\x00"


def test_save_load_all_255(tmp_path):
    r = Raster(np.full((2, 2, 3), 255, np.uint8))
    save_raster(r, tmp_path / "a.png")
    assert load_raster(tmp_path / "a.png") == r


def test_save_512_nonempty(tmp_path):
    save_raster(Raster(np.zeros((512, 512, 3), np.uint8)), tmp_path / "big.png")
    assert (tmp_path / "big.png").stat().st_size > 0


def test_png_round_trip_random(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(100):
        h, w = rng.integers(1, 65, size=2)
        c = (1, 3, 4)[i % 3]
        buf = rng.integers(0, 256, (h, w, c), dtype=np.uint8)
        before = buf.tobytes()
        save_raster(Raster(buf), tmp_path / "r.png")
        assert load_raster(tmp_path / "r.png").data.tobytes() == before


def test_tiff_round_trip(tmp_path):
    buf = np.random.default_rng(2).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    save_raster(Raster(buf), tmp_path / "r.tif")
    assert load_raster(tmp_path / "r.tif").data.tobytes() == buf.tobytes()


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_raster(tmp_path / "missing.png")
    (tmp_path / "a.bmp").write_bytes(b"BM")
    with pytest.raises(UnsupportedFormatError):
        load_raster(tmp_path / "a.bmp")
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\n garbage")
    with pytest.raises(CorruptRasterError):
        load_raster(tmp_path / "bad.png")
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "trunc.png")
    data = (tmp_path / "trunc.png").read_bytes()
    (tmp_path / "trunc.png").write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptRasterError):
        load_raster(tmp_path / "trunc.png")


def test_16bit_png_is_unsupported(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(tmp_path / "a.png")
    with pytest.raises(UnsupportedFormatError):
        load_raster(tmp_path / "a.png")


# palette ------------------------------------------------------------------------

def test_default_palette_matches_legend():
    p = DEFAULT_PALETTE
    assert p.entries[0] == ("Unrecognized", (0, 0, 0))
    assert dict(p.entries)["Water"] == (0, 0, 255)
    assert dict(p.entries)["BuiltUp"] == (255, 0, 0)
    assert dict(p.entries)["Farmland"] == (0, 255, 0)
    assert dict(p.entries)["Meadow"] == (255, 255, 0)
    assert dict(p.entries)["Forest"] == (0, 255, 255)
    assert len(p) == 6


def test_palette_invariants():
    with pytest.raises(PaletteError):
        Palette((("A", (1, 1, 1)),))
    with pytest.raises(PaletteError):
        Palette((("U", (0, 0, 0)), ("A", (1, 2, 3)), ("B", (1, 2, 3))))


def test_palette_file_round_trip(tmp_path):
    DEFAULT_PALETTE.to_file(tmp_path / "p.txt")
    assert Palette.from_file(tmp_path / "p.txt") == DEFAULT_PALETTE
    (tmp_path / "bad.txt").write_text("Unrecognized = 0,0,0\nWater = blue\n")
    with pytest.raises(PaletteError):
        Palette.from_file(tmp_path / "bad.txt")


def test_decode_all_black():
    m = decode_mask(Raster(np.zeros((3, 4, 3), np.uint8)))
    assert not m.labels.any()


def test_decode_water():
    r = Raster(np.broadcast_to(np.array([0, 0, 255], np.uint8), (4, 4, 3)))
    assert (decode_mask(r).labels == DEFAULT_PALETTE.index("Water")).all()


def test_decode_strict_and_lenient():
    d = np.zeros((3, 3, 3), np.uint8)
    d[1, 2] = (10, 20, 30)
    with pytest.raises(PaletteError, match=r"\(10, 20, 30\).*x=2, y=1"):
        decode_mask(Raster(d))
    m = decode_mask(Raster(d), strict=False)
    assert not m.labels.any()


def test_encode_zero_mask_is_black():
    assert not encode_mask(ClassMask(np.zeros((2, 3), np.uint8))).data.any()


def test_encode_five_class_row():
    r = encode_mask(ClassMask(np.array([[1, 2, 3, 4, 5]])))
    assert [tuple(px) for px in r.data[0]] == [(255, 0, 0), (0, 255, 0), (0, 255, 255), (255, 255, 0), (0, 0, 255)]


def test_encode_out_of_range():
    with pytest.raises(PaletteError):
        encode_mask(ClassMask(np.array([[6]])))


def test_mask_codec_round_trip_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        h, w = rng.integers(1, 40, size=2)
        m = ClassMask(rng.integers(0, 6, (h, w)))
        assert decode_mask(encode_mask(m)) == m


def test_mask_codec_round_trip_exhaustive_2x2():
    import itertools

    for labels in itertools.product(range(6), repeat=4):
        m = ClassMask(np.array(labels).reshape(2, 2))
        assert decode_mask(encode_mask(m)) == m


def test_mask_codec_through_png(tmp_path):
    m = ClassMask(np.random.default_rng(4).integers(0, 6, (17, 23)))
    save_raster(encode_mask(m), tmp_path / "gt.png")
    assert decode_mask(load_raster(tmp_path / "gt.png")) == m
