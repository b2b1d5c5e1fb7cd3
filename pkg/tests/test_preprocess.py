import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.interpolate import RegularGridInterpolator

from ct2pet.preprocess import (
    Grid,
    RigidTransform,
    SuvParams,
    UnitError,
    apply_rigid,
    clamp_normalize_pet,
    normalize_ct,
    preprocess_pair,
    resample_nearest,
    resample_trilinear,
    suv_convert,
)
from ct2pet.volume import Modality, Unit, Volume


def bq(value, shape=(2, 2, 2)):
    return Volume(np.full(shape, value, np.float32), modality=Modality.PET, unit=Unit.BQ_PER_ML)


def rz(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def interp_oracle(v: Volume, grid: Grid) -> np.ndarray:
    """Trilinear oracle via scipy's regular-grid interpolator, 0 outside the source extent."""
    axes = [v.origin[i] + np.arange(v.shape[i]) * v.spacing[i] for i in range(3)]
    f = RegularGridInterpolator(axes, v.data.astype(np.float64), method="linear",
                                bounds_error=False, fill_value=0.0)
    pts = np.stack(np.meshgrid(*[grid.origin[i] + np.arange(grid.dims[i]) * grid.spacing[i]
                                 for i in range(3)], indexing="ij"), -1)
    return f(pts)


@pytest.mark.parametrize("conc,expected", [(5000.0, 1.0), (0.0, 0.0), (10000.0, 2.0)])
def test_suv_examples(conc, expected):
    out = suv_convert(bq(conc), SuvParams(70.0, 350e6))
    np.testing.assert_allclose(out.data, expected, rtol=1e-6)
    assert out.unit is Unit.SUV


def test_suv_params_positive():
    with pytest.raises(ValueError):
        SuvParams(0.0, 350e6)
    with pytest.raises(ValueError):
        SuvParams(70.0, -1.0)


@given(st.floats(0, 1e5), st.floats(1, 200), st.floats(1e6, 1e9))
def test_suv_scaling(conc, weight, dose):
    base = float(suv_convert(bq(conc), SuvParams(weight, dose)).data[0, 0, 0])
    double_w = float(suv_convert(bq(conc), SuvParams(2 * weight, dose)).data[0, 0, 0])
    double_d = float(suv_convert(bq(conc), SuvParams(weight, 2 * dose)).data[0, 0, 0])
    np.testing.assert_allclose(double_w, 2 * base, rtol=1e-5, atol=1e-30)
    np.testing.assert_allclose(double_d, base / 2, rtol=1e-5, atol=1e-30)


@pytest.mark.parametrize("suv,expected", [(10.0, 0.5), (25.0, 1.0), (0.0, 0.0)])
def test_pet_window(suv, expected):
    v = Volume(np.full((2, 2, 2), suv, np.float32), unit=Unit.SUV)
    out = clamp_normalize_pet(v)
    np.testing.assert_allclose(out.data, expected)
    assert out.unit is Unit.NORMALIZED


@given(st.lists(st.floats(0, 100), min_size=2, max_size=20))
def test_pet_window_monotone_idempotent(values):
    x = np.sort(np.asarray(values, dtype=np.float32)).reshape(-1, 1, 1)
    out = clamp_normalize_pet(Volume(x, unit=Unit.SUV)).data
    assert np.all(np.diff(out.ravel()) >= 0)
    again = clamp_normalize_pet(Volume(out * 20, unit=Unit.SUV)).data
    np.testing.assert_allclose(again, out, atol=1e-6)


def test_unit_errors():
    with pytest.raises(UnitError):
        clamp_normalize_pet(bq(1.0))
    with pytest.raises(UnitError):
        suv_convert(Volume(np.zeros((2, 2, 2), np.float32), unit=Unit.SUV), SuvParams(70, 3e8))
    with pytest.raises(UnitError):
        normalize_ct(Volume(np.zeros((2, 2, 2), np.float32), unit=Unit.NORMALIZED))


def test_ct_minmax():
    v = Volume(np.array([-1000, 0, 1000], np.float32).reshape(3, 1, 1), unit=Unit.HU)
    np.testing.assert_allclose(normalize_ct(v).data.ravel(), [0, 0.5, 1.0])
    const = Volume(np.full((2, 2, 2), 40.0, np.float32), unit=Unit.HU)
    assert not normalize_ct(const).data.any()
    unit_range = np.array([0, 0.25, 1], np.float32).reshape(3, 1, 1)
    np.testing.assert_allclose(normalize_ct(Volume(unit_range, unit=Unit.HU)).data, unit_range)


def test_ramp_midpoint():
    v = Volume(np.array([0.0, 1.0], np.float32).reshape(2, 1, 1))
    out = resample_trilinear(v, (1, 1, 1), (1, 1, 1), (0.5, 0, 0))
    assert out.data[0, 0, 0] == pytest.approx(0.5)


def test_resample_identity_and_constant():
    rng = np.random.default_rng(1)
    v = Volume(rng.random((5, 6, 7)).astype(np.float32), spacing=(1.0, 2.0, 0.5), origin=(3, -1, 0))
    same = resample_trilinear(v, v.shape, v.spacing, v.origin)
    np.testing.assert_allclose(same.data, v.data, atol=1e-6)
    const = Volume(np.full((6, 6, 6), 0.3, np.float32))
    out = resample_trilinear(const, (4, 4, 4), (1.3, 1.1, 0.7), (0.4, 0.2, 0.9))
    np.testing.assert_allclose(out.data, 0.3, atol=1e-6)


def test_degenerate_grid():
    v = Volume(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(ValueError):
        resample_trilinear(v, (0, 2, 2), (1, 1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        resample_trilinear(v, (2, 2, 2), (1, -1, 1), (0, 0, 0))


@given(st.integers(0, 2 ** 31 - 1))
def test_resample_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(rng.integers(2, 7, 3))
    v = Volume(rng.random(dims).astype(np.float32), spacing=tuple(rng.uniform(0.5, 2, 3)),
               origin=tuple(rng.uniform(-2, 2, 3)))
    grid = Grid(tuple(int(d) for d in rng.integers(1, 8, 3)), tuple(rng.uniform(0.3, 2, 3)),
                tuple(rng.uniform(-3, 3, 3)))
    out = resample_trilinear(v, *grid)
    np.testing.assert_allclose(out.data, interp_oracle(v, grid), atol=1e-5)


@given(st.integers(0, 2 ** 31 - 1))
def test_rigid_identity_equals_resample(seed):
    rng = np.random.default_rng(seed)
    v = Volume(rng.random((5, 5, 5)).astype(np.float32), spacing=(1.0, 1.5, 2.0))
    grid = Grid((4, 6, 3), (1.2, 0.9, 2.1), tuple(rng.uniform(-1, 2, 3)))
    a = apply_rigid(v, RigidTransform.identity(), grid).data
    b = resample_trilinear(v, *grid).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_rigid_translation_moves_impulse():
    data = np.zeros((7, 7, 7), np.float32)
    data[3, 3, 3] = 1.0
    v = Volume(data)
    out = apply_rigid(v, RigidTransform(np.eye(3), (1.0, 0.0, 0.0)), Grid.of(v)).data
    assert out[4, 3, 3] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)


def test_rotation_180_twice_is_identity():
    rng = np.random.default_rng(3)
    n = 9
    origin = (-(n - 1) / 2,) * 3  # grid centered on the rotation axis
    v = Volume(rng.random((n, n, n)).astype(np.float32), origin=origin)
    t = RigidTransform(rz(180))
    once = apply_rigid(v, t, Grid.of(v))
    twice = apply_rigid(once, t, Grid.of(v))
    np.testing.assert_allclose(twice.data, v.data, atol=1e-5)
    np.testing.assert_allclose(once.data, v.data[::-1, ::-1, :], atol=1e-5)


def test_rigid_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.1)
    m = np.eye(4)
    m[:3, 3] = [1, 2, 3]
    assert RigidTransform.from_matrix(m).translation == (1.0, 2.0, 3.0)


def test_nearest_labels_follow_grid():
    labels = np.zeros((4, 4, 4), np.uint8)
    labels[2:, :, :] = 3
    out = resample_nearest(labels, (1, 1, 1), (0, 0, 0), Grid((2, 4, 4), (2.0, 1, 1), (0, 0, 0)))
    assert out.dtype == np.uint8
    assert (out[0] == 0).all() and (out[1] == 3).all()


def test_preprocess_pair_lands_on_pet_grid():
    ct = Volume(np.linspace(-1000, 1000, 64, dtype=np.float32).reshape(4, 4, 4), unit=Unit.HU)
    pet = Volume(np.full((2, 2, 2), 5000.0, np.float32), spacing=(2, 2, 2), origin=(0.5, 0.5, 0.5),
                 modality=Modality.PET, unit=Unit.BQ_PER_ML)
    c, p = preprocess_pair(ct, pet, SuvParams(70, 350e6))
    assert c.shape == p.shape == (2, 2, 2)
    assert c.spacing == p.spacing == (2.0, 2.0, 2.0)
    np.testing.assert_allclose(p.data, 1.0 / 20)
    assert c.unit is Unit.NORMALIZED and 0 <= c.data.min() and c.data.max() <= 1
