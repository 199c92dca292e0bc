import logging
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import smooth_texture, translate
from hycd.coregister import FlowField, FlowParams, compute_flow, coregister_pair, warp
from hycd.errors import BoundsError, ShapeError, ValidationError
from hycd.raster import RasterImage

MARGIN = 16


def _interior(a, m=MARGIN):
    return a[m:-m, m:-m]


def _endpoint_error(flow, dx, dy):
    return float(_interior(np.hypot(flow.u - dx, flow.v - dy)).mean())


@pytest.fixture
def texture(rng):
    return smooth_texture(rng, 128, 128)


def test_params_validation():
    for kwargs in ({"pyramid_levels": 0}, {"window_radius": 0}, {"iterations_per_level": 0},
                   {"regularization_eps": 0}):
        with pytest.raises(ValidationError):
            FlowParams(**kwargs)


def test_identity_flow_is_zero(texture):
    img = RasterImage(texture)
    flow = compute_flow(img, img)
    assert flow.max_displacement() <= 1e-3


def test_constant_image_gives_zero_update():
    img = RasterImage(np.full((32, 32), 3.0))
    flow = compute_flow(img, RasterImage(np.full((32, 32), 5.0)))
    assert flow.max_displacement() == 0.0


def test_integer_translation_recovered(texture):
    t0 = time.perf_counter()
    flow = compute_flow(RasterImage(texture), RasterImage(translate(texture, 2, 3)))
    assert time.perf_counter() - t0 < 10
    assert _endpoint_error(flow, 2, 3) <= 0.25


def test_subpixel_translation_recovered(rng):
    # half-pixel shift of a band-limited texture, built in the Fourier domain
    base = smooth_texture(rng, 128, 128)
    fx = np.fft.fftfreq(128)[None, :]
    shifted = np.real(np.fft.ifft2(np.fft.fft2(base) * np.exp(-2j * np.pi * fx * 0.5)))
    flow = compute_flow(RasterImage(base), RasterImage(shifted))
    mean_u = float(_interior(flow.u).mean())
    assert 0.25 <= mean_u <= 0.75
    assert abs(mean_u - 0.5) <= 0.25


@pytest.mark.parametrize("dx,dy", [(-2, 1), (4, -3), (0, 5)])
def test_translation_equivariance(rng, dx, dy):
    tex = smooth_texture(rng, 128, 128, sigma=4.0)
    flow = compute_flow(RasterImage(tex), RasterImage(translate(tex, dx, dy)))
    assert _endpoint_error(flow, dx, dy) <= 0.25


def test_flow_is_deterministic(texture):
    a = compute_flow(RasterImage(texture), RasterImage(translate(texture, 1, 2)))
    b = compute_flow(RasterImage(texture), RasterImage(translate(texture, 1, 2)))
    assert a.u.tobytes() == b.u.tobytes() and a.v.tobytes() == b.v.tobytes()


def test_shape_checks(texture):
    with pytest.raises(ShapeError):
        compute_flow(RasterImage(texture), RasterImage(texture[:64]))
    with pytest.raises(ShapeError):
        compute_flow(RasterImage(np.stack([texture, texture])), RasterImage(texture))
    with pytest.raises(ShapeError):
        warp(RasterImage(texture), FlowField.constant(64, 64, 0, 0))


def test_zero_flow_warp_is_identity(texture):
    img = RasterImage(texture)
    out = warp(img, FlowField.constant(128, 128, 0.0, 0.0))
    assert np.abs(out.data - img.data).max() <= 1e-6
    assert out.nodata_mask is None or not out.nodata_mask.any()


def test_constant_flow_on_ramp():
    ramp = np.tile(np.arange(16, dtype=np.float32), (8, 1))
    out = warp(RasterImage(ramp), FlowField.constant(16, 8, 1.0, 0.0))
    assert np.array_equal(out.data[0, :, :15], ramp[:, :15] + 1)
    assert out.nodata_mask[:, 15].all()


def test_warp_inverts_translation(texture):
    moved = RasterImage(translate(texture, 2, 3))
    out = warp(moved, FlowField.constant(128, 128, 2.0, 3.0))
    assert np.abs(_interior(out.data[0]) - _interior(texture)).max() <= 1e-5


def test_out_of_image_samples_become_nodata(texture):
    out = warp(RasterImage(texture), FlowField.constant(128, 128, -2.5, 0.0))
    assert out.nodata_mask[:, :3].all()
    assert not out.nodata_mask[:, 3:].any()


def test_nodata_source_taints_neighbours():
    data = np.ones((1, 5, 5), np.float32)
    nodata = np.zeros((5, 5), bool)
    nodata[2, 2] = True
    out = warp(RasterImage(data, nodata_mask=nodata), FlowField.constant(5, 5, 0.5, 0.0))
    assert out.nodata_mask[2, 1] and out.nodata_mask[2, 2]
    assert not out.nodata_mask[2, 3]


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_warp_is_linear(a, b, du, dv):
    r = np.random.default_rng(7)
    i1 = r.random((12, 12)).astype(np.float32)
    i2 = r.random((12, 12)).astype(np.float32)
    flow = FlowField.constant(12, 12, du, dv)
    lhs = warp(RasterImage(a * i1 + b * i2), flow).data
    rhs = a * warp(RasterImage(i1), flow).data + b * warp(RasterImage(i2), flow).data
    assert np.allclose(lhs, rhs, atol=1e-5)


def test_coregister_pair_identity(texture):
    img = RasterImage(np.stack([texture, 2 * texture]))
    warped, flow = coregister_pair(img, img, 0)
    assert np.abs(warped.data - img.data).max() <= 1e-6
    assert flow.max_displacement() <= 1e-3


def test_coregister_pair_multiband_translation(rng):
    bands = np.stack([smooth_texture(rng, 128, 128) * (k + 1) + k for k in range(4)])
    before = RasterImage(bands)
    after = RasterImage(translate(bands, 3, 1))
    warped, flow = coregister_pair(before, after, 1)
    for k in range(4):
        rng_k = float(bands[k].max() - bands[k].min())
        err = np.abs(_interior(warped.data[k]) - _interior(bands[k]))
        assert err.max() <= 0.02 * rng_k


def test_coregister_pair_band_bounds(texture):
    img = RasterImage(np.stack([texture, texture]))
    with pytest.raises(BoundsError):
        coregister_pair(img, img, 2)


def test_large_shift_is_logged(rng, caplog):
    tex = smooth_texture(rng, 128, 128, sigma=5.0)
    with caplog.at_level(logging.WARNING, logger="hycd.coregister"):
        coregister_pair(RasterImage(tex), RasterImage(translate(tex, 7, 0)), 0)
    assert any("5 px" in r.message for r in caplog.records)


def test_flow_raster_roundtrip(texture):
    flow = FlowField(np.full((4, 5), 1.5), np.full((4, 5), -0.5))
    back = FlowField.from_raster(flow.to_raster())
    assert np.array_equal(back.u, flow.u) and np.array_equal(back.v, flow.v)
    assert flow.max_displacement() == 1.5
