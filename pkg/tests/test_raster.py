import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from hycd.errors import BoundsError, FormatError, ShapeError, SizeError, ValidationError
from hycd.raster import (ChangeMap, RasterImage, ScalarMap, extract_patch, nearest_band,
                         read_mask_pgm, read_raster, read_scalar_map, select_bands,
                         union_nodata, write_mask_pgm, write_raster, write_scalar_map)


def _write_raw(path, header, payload):
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(str(path) + ".json", "w") as fh:
        json.dump(header, fh)


def test_read_decodes_two_pixels(tmp_path):
    p = tmp_path / "a.bin"
    _write_raw(p, {"width": 2, "height": 1, "bands": 1, "dtype": "f32", "byte_order": "little"},
               struct.pack("<2f", 1.5, 2.5))
    img = read_raster(p)
    assert img.shape == (1, 1, 2)
    assert img.data.ravel().tolist() == [1.5, 2.5]


def test_read_short_file_is_size_error(tmp_path):
    p = tmp_path / "a.bin"
    _write_raw(p, {"width": 2, "height": 1, "bands": 2}, struct.pack("<2f", 1.5, 2.5))
    with pytest.raises(SizeError):
        read_raster(p)


def test_missing_and_garbled_headers(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(b"\0" * 4)
    with pytest.raises(FormatError):
        read_raster(p)
    (tmp_path / "a.bin.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_raster(p)
    (tmp_path / "a.bin.json").write_text('{"width": 1}')
    with pytest.raises(FormatError):
        read_raster(p)


def test_nonfinite_value_names_first_index(tmp_path):
    p = tmp_path / "a.bin"
    _write_raw(p, {"width": 3, "height": 1, "bands": 1},
               struct.pack("<3f", 0.0, float("nan"), float("inf")))
    with pytest.raises(ValidationError, match="index 1"):
        read_raster(p)


@pytest.mark.parametrize("value,expected", [(0.0, b"\x00\x00\x00\x00"),
                                            (1.0, b"\x00\x00\x80\x3f")])
def test_write_single_value_bytes(tmp_path, value, expected):
    p = tmp_path / "one.bin"
    write_raster(RasterImage(np.full((1, 1, 1), value)), p)
    assert p.read_bytes() == expected


def test_random_roundtrip_is_bit_exact(tmp_path, rng):
    data = rng.standard_normal((4, 8, 8)).astype(np.float32)
    data[0, 0, 0] = -0.0
    p = tmp_path / "r.bin"
    write_raster(RasterImage(data, wavelengths_nm=[400, 500, 600, 700]), p)
    back = read_raster(p)
    assert back.data.tobytes() == data.tobytes()
    assert back.wavelengths_nm == (400.0, 500.0, 600.0, 700.0)
    q = tmp_path / "r2.bin"
    write_raster(back, q)
    assert q.read_bytes() == p.read_bytes()


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_roundtrip_property(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("rt") / "x.bin"
    write_raster(RasterImage(data), p)
    assert read_raster(p).data.tobytes() == data.astype("<f4").tobytes()


def test_band_sequential_layout(tmp_path):
    bands, h, w = 3, 2, 4
    data = np.zeros((bands, h, w), np.float32)
    for k in range(bands):
        for y in range(h):
            for x in range(w):
                data[k, y, x] = 100 * k + 10 * y + x
    p = tmp_path / "l.bin"
    write_raster(RasterImage(data), p)
    flat = np.frombuffer(p.read_bytes(), "<f4")
    for k, y, x in [(0, 0, 3), (1, 1, 0), (2, 1, 2)]:
        assert flat[k * w * h + y * w + x] == 100 * k + 10 * y + x


def test_nodata_roundtrip(tmp_path, rng):
    data = rng.random((2, 3, 3)).astype(np.float32)
    nodata = np.zeros((3, 3), bool)
    nodata[1, 2] = True
    data[:, 1, 2] = np.nan
    p = tmp_path / "n.bin"
    write_raster(RasterImage(data, nodata_mask=nodata), p)
    back = read_raster(p)
    assert back.nodata_mask.tolist() == nodata.tolist()
    assert not back.valid_mask[1, 2]


def test_wavelengths_validated():
    with pytest.raises(ValidationError):
        RasterImage(np.zeros((2, 1, 1)), wavelengths_nm=[500, 400])
    with pytest.raises(ValidationError):
        RasterImage(np.zeros((2, 1, 1)), wavelengths_nm=[500])


def test_images_are_immutable_copies():
    src = np.zeros((1, 2, 2), np.float32)
    img = RasterImage(src)
    src[0, 0, 0] = 7
    assert img.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1


def test_pgm_encoding(tmp_path):
    p = tmp_path / "m.pgm"
    write_mask_pgm(ChangeMap(np.array([[True, False]]), 0.5, "t"), p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n2 1\n255\n")
    assert raw[len(b"P5\n2 1\n255\n"):] == bytes([255, 0])
    write_mask_pgm(ChangeMap(np.zeros((3, 2), bool), 0.5, "t"), p)
    assert set(p.read_bytes()[len(b"P5\n2 3\n255\n"):]) == {0}


def test_pgm_roundtrip(tmp_path, rng):
    mask = rng.random((5, 7)) > 0.5
    p = tmp_path / "m.pgm"
    write_mask_pgm(ChangeMap(mask, 0.1, "t"), p)
    assert read_mask_pgm(p).mask.tolist() == mask.tolist()


def test_scalar_map_roundtrip(tmp_path, rng):
    smap = ScalarMap(rng.random((4, 5)), "magnitude")
    p = tmp_path / "s.bin"
    write_scalar_map(smap, p)
    assert np.array_equal(read_scalar_map(p, "magnitude").values, smap.values)


def test_scalar_map_invariants():
    with pytest.raises(ValidationError):
        ScalarMap(np.array([[-1.0]]), "magnitude")
    with pytest.raises(ValidationError):
        ScalarMap(np.array([[4.0]]), "angle_radians")
    with pytest.raises(ValidationError):
        ScalarMap(np.zeros((1, 1)), "banana")


def test_changemap_forces_nodata_to_no_change():
    valid = np.array([[True, False]])
    cmap = ChangeMap(np.array([[True, True]]), 1.0, "t", valid)
    assert cmap.mask.tolist() == [[True, False]]
    assert cmap.changed_percent == 100.0
    with pytest.raises(ValidationError):
        ChangeMap(np.zeros((1, 1), bool), float("inf"), "t")


def test_extract_patch_examples():
    data = np.arange(2 * 4 * 4, dtype=np.float32).reshape(2, 4, 4)
    img = RasterImage(data)
    patch = extract_patch(img, 1, 1, 2)
    assert np.array_equal(patch.data, data[:, 1:3, 1:3])
    assert np.array_equal(extract_patch(img, 0, 0, 4).data, data)
    with pytest.raises(BoundsError):
        extract_patch(img, 3, 0, 2)


def test_extract_patch_full_512_identity(rng):
    img = RasterImage(rng.random((1, 512, 512)))
    assert np.array_equal(extract_patch(img, 0, 0, 512).data, img.data)


@given(st.integers(0, 4), st.integers(0, 4), st.integers(1, 6), st.integers(0, 3),
       st.integers(0, 3), st.integers(1, 4))
def test_patches_compose(ax, ay, asize, bx, by, bsize):
    img = RasterImage(np.arange(2 * 12 * 12, dtype=np.float32).reshape(2, 12, 12))
    if ax + asize > 12 or ay + asize > 12 or bx + bsize > asize or by + bsize > asize:
        return
    two = extract_patch(extract_patch(img, ax, ay, asize), bx, by, bsize)
    one = extract_patch(img, ax + bx, ay + by, bsize)
    assert np.array_equal(two.data, one.data)


def test_select_and_nearest_band():
    img = RasterImage(np.arange(3, dtype=np.float32).reshape(3, 1, 1), [450, 550, 650])
    assert select_bands(img, [2, 0]).data.ravel().tolist() == [2, 0]
    assert nearest_band(img, 560) == 1
    with pytest.raises(BoundsError):
        select_bands(img, [3])
    with pytest.raises(ShapeError):
        RasterImage(np.zeros((1, 1, 1, 1)))


def test_union_nodata():
    a = np.array([[True, False]])
    b = np.array([[False, False]])
    assert union_nodata(None, None) is None
    assert union_nodata(a, None).tolist() == a.tolist()
    assert union_nodata(a, b).tolist() == [[True, False]]
