import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import naive_magnitude
from hycd.cva import (ReferenceVector, c2va_change_map, change_magnitude, default_reference,
                      phase_angle)
from hycd.errors import DomainError, EmptyStatisticsError, ShapeError, ValidationError
from hycd.raster import RasterImage


def _pixel(values):
    return RasterImage(np.asarray(values, np.float32).reshape(-1, 1, 1))


def test_magnitude_three_four_five():
    assert change_magnitude(_pixel([1, 2]), _pixel([4, 6])).values[0, 0] == 5.0


def test_identical_images_have_zero_magnitude(rng):
    img = RasterImage(rng.random((5, 6, 7)))
    assert not change_magnitude(img, img).values.any()


def test_magnitude_matches_double_loop(rng):
    b = rng.random((240, 16, 16)).astype(np.float32)
    a = rng.random((240, 16, 16)).astype(np.float32)
    rho = change_magnitude(RasterImage(b), RasterImage(a)).values
    ref = naive_magnitude(b, a)
    assert np.max(np.abs(rho - ref) / ref) <= 1e-4


def test_magnitude_shape_mismatch():
    with pytest.raises(ShapeError):
        change_magnitude(RasterImage(np.zeros((2, 3, 3))), RasterImage(np.zeros((3, 3, 3))))


def test_nodata_propagates():
    nodata = np.array([[True, False]])
    b = RasterImage(np.zeros((2, 1, 2)), nodata_mask=nodata)
    a = RasterImage(np.ones((2, 1, 2)))
    rho = change_magnitude(b, a)
    assert rho.nodata_mask.tolist() == [[True, False]]


@pytest.mark.parametrize("B,expected", [(1, [1.0]), (4, [0.5] * 4)])
def test_default_reference(B, expected):
    assert default_reference(B).components.tolist() == expected


@given(st.integers(1, 500))
def test_default_reference_unit_norm(B):
    assert abs(np.linalg.norm(default_reference(B).components) - 1) <= 1e-6


def test_reference_validation():
    with pytest.raises(DomainError):
        default_reference(0)
    with pytest.raises(ValidationError):
        ReferenceVector([1.0, 1.0])
    assert np.allclose(ReferenceVector.from_direction([3, 4]).components, [0.6, 0.8])


@pytest.mark.parametrize("d,theta", [((1, 1), 0.0), ((1, -1), math.pi / 2),
                                     ((-1, -1), math.pi)])
def test_phase_angle_cases(d, theta):
    got = phase_angle(_pixel([0, 0]), _pixel(d)).values[0, 0]
    assert abs(got - theta) <= 1e-6


def test_zero_change_angle_is_nodata():
    theta = phase_angle(_pixel([1, 2]), _pixel([1, 2]))
    assert theta.nodata_mask.all()


def test_reference_length_must_match():
    with pytest.raises(ShapeError):
        phase_angle(_pixel([0, 0]), _pixel([1, 1]), default_reference(3))


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@given(hnp.arrays(np.float32, (3, 4, 4), elements=finite),
       hnp.arrays(np.float32, (3, 4, 4), elements=finite))
def test_magnitude_and_angle_properties(b, a):
    before, after = RasterImage(b), RasterImage(a)
    rho = change_magnitude(before, after).values
    assert (rho >= 0).all()
    assert np.array_equal(rho, change_magnitude(after, before).values)
    assert np.array_equal(rho == 0, (a == b).all(axis=0))
    theta = phase_angle(before, after)
    v = theta.valid_values()
    assert ((v >= 0) & (v <= np.float32(math.pi))).all()


@given(st.floats(0.01, 100))
def test_positive_scaling(c):
    r = np.random.default_rng(3)
    b = r.random((4, 8, 8))
    a = r.random((4, 8, 8))
    cm1, rho1, th1 = c2va_change_map(RasterImage(b), RasterImage(a))
    cm2, rho2, th2 = c2va_change_map(RasterImage(c * b), RasterImage(c * a))
    assert np.allclose(rho2.values, c * rho1.values, rtol=1e-5)
    assert np.allclose(th2.values, th1.values, atol=1e-5)
    assert np.array_equal(cm1.mask, cm2.mask)


def test_c2va_marks_ten_percent_of_distinct_values(rng):
    b = RasterImage(rng.random((8, 32, 32)))
    a = RasterImage(rng.random((8, 32, 32)))
    cmap, rho, _ = c2va_change_map(b, a)
    assert len(np.unique(rho.values)) == 1024
    assert int(cmap.mask.sum()) == 1024 - math.ceil(0.9 * 1024)
    assert cmap.method_tag == "c2va_p90"


def test_c2va_identical_pair_is_empty(rng):
    img = RasterImage(rng.random((4, 10, 10)))
    cmap, _, _ = c2va_change_map(img, img)
    assert cmap.threshold_used == 0.0
    assert cmap.changed_percent == 0.0


def test_c2va_one_to_hundred():
    before = RasterImage(np.zeros((1, 10, 10)))
    after = RasterImage(np.arange(1, 101, dtype=np.float32).reshape(1, 10, 10))
    cmap, _, _ = c2va_change_map(before, after)
    assert cmap.threshold_used == 90.0
    assert np.flatnonzero(cmap.mask.ravel()).tolist() == list(range(90, 100))


def test_c2va_all_nodata_raises():
    nodata = np.ones((2, 2), bool)
    img = RasterImage(np.zeros((1, 2, 2)), nodata_mask=nodata)
    with pytest.raises(EmptyStatisticsError):
        c2va_change_map(img, img)


def test_equal_spectra_never_change(rng):
    b = rng.random((3, 10, 10))
    a = b.copy()
    a[:, :5] += rng.random((3, 5, 10))
    cmap, _, _ = c2va_change_map(RasterImage(b), RasterImage(a), 50)
    assert not cmap.mask[5:].any()
