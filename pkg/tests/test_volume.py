import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungcad.errors import InvalidVolumeError
from lungcad.volume import (
    Unit, Volume, WorldPoint, clip_and_rescale, hu_from_raw, load_mask_nvol,
    load_nvol, resample, save_mask_nvol, save_nvol,
)
from lungcad.segmentation import Mask

from conftest import make_volume


def raw_volume(data, spacing=(1, 1, 1)):
    return Volume(np.asarray(data, np.float32), spacing, unit=Unit.RAW)


class TestHuFromRaw:
    def test_identity_rescale(self):
        v = raw_volume(np.full((2, 2, 2), 1024.0))
        out = hu_from_raw(v, slope=1.0, intercept=-1024.0)
        npt.assert_array_equal(out.data, 0.0)
        assert out.unit is Unit.HOUNSFIELD

    def test_intercept_only(self):
        v = raw_volume(np.zeros((1, 1, 1)))
        assert hu_from_raw(v, 1.0, -1024.0).data[0, 0, 0] == -1024.0

    def test_affine_map(self):
        v = raw_volume(np.full((1, 1, 1), 5.0))
        assert hu_from_raw(v, 2.0, 10.0).data[0, 0, 0] == 20.0

    def test_wrong_unit_rejected(self):
        v = make_volume(np.zeros((1, 1, 1)))
        with pytest.raises(InvalidVolumeError):
            hu_from_raw(v, 1.0, 0.0)

    def test_inverse_roundtrip(self, rng):
        raw = Volume(rng.uniform(0, 4000, size=(3, 4, 5)), (1, 1, 1), unit=Unit.RAW)
        hu = hu_from_raw(raw, slope=2.0, intercept=-1000.0)
        back = (hu.data - (-1000.0)) / 2.0
        npt.assert_allclose(back, raw.data, atol=1e-9)

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(InvalidVolumeError):
            Volume(np.zeros((0, 2, 2), np.float32), (1, 1, 1), unit=Unit.RAW)


class TestClipAndRescale:
    @pytest.mark.parametrize("hu,lum", [(-1200.0, 0.0), (600.0, 255.0), (0.0, 170.0),
                                        (-3000.0, 0.0), (900.0, 255.0)])
    def test_anchor_points(self, hu, lum):
        v = make_volume(np.full((1, 1, 1), hu))
        out = clip_and_rescale(v)
        assert out.unit is Unit.LUMINANCE
        npt.assert_allclose(out.data[0, 0, 0], lum, atol=1e-4)

    def test_monotone_and_in_range(self, rng):
        hu = np.sort(rng.uniform(-2000, 2000, size=64))
        out = clip_and_rescale(make_volume(hu.reshape(1, 1, -1))).data.reshape(-1)
        assert np.all(np.diff(out) >= 0)
        assert out.min() >= 0.0 and out.max() <= 255.0

    def test_requires_hounsfield(self):
        v = make_volume(np.zeros((1, 1, 1)), unit=Unit.RAW)
        with pytest.raises(InvalidVolumeError):
            clip_and_rescale(v)


class TestResample:
    def test_factor_two_downsample_dims(self, rng):
        v = make_volume(rng.normal(size=(64, 64, 64)), spacing=(0.5, 0.5, 0.5))
        out = resample(v, (1.0, 1.0, 1.0))
        assert out.dims == (32, 32, 32)

    def test_constant_stays_constant(self, rng):
        v = make_volume(np.full((8, 9, 10), 3.25), spacing=(0.7, 1.1, 2.3))
        out = resample(v, (1.9, 0.4, 1.0))
        npt.assert_allclose(out.data, 3.25, atol=1e-6)

    def test_linear_ramp_exact(self):
        # f(x) = 2x mm^-1: trilinear interpolation reproduces affine fields
        nx = 32
        xs = np.arange(nx) * 0.5
        data = np.broadcast_to(2.0 * xs, (4, 4, nx)).copy()
        v = make_volume(data, spacing=(0.5, 1.0, 1.0))
        out = resample(v, (0.8, 1.0, 1.0))
        expected = 2.0 * (np.arange(out.dims[0]) * 0.8)
        # clamp keeps the final samples inside; all sample points here are interior
        npt.assert_allclose(out.data[0, 0, :], expected, atol=1e-6)

    def test_idempotent_at_same_spacing(self, rng):
        v = make_volume(rng.normal(size=(6, 7, 8)), spacing=(1.0, 1.5, 2.0))
        out = resample(v, (1.0, 1.5, 2.0))
        npt.assert_allclose(out.data, v.data, atol=1e-9)
        assert out.dims == v.dims

    def test_bad_spacing_rejected(self, rng):
        v = make_volume(rng.normal(size=(2, 2, 2)))
        with pytest.raises(InvalidVolumeError):
            resample(v, (0.0, 1.0, 1.0))


class TestWorldGeometry:
    def test_voxel_at_roundtrip(self):
        v = make_volume(np.zeros((4, 5, 6)), spacing=(1.0, 2.0, 3.0), origin=(-1.0, 2.0, 5.0))
        p = v.world_at(3, 2, 1)
        assert v.voxel_at(p) == (3, 2, 1)

    def test_nonfinite_point_rejected(self):
        with pytest.raises(ValueError):
            WorldPoint(float("nan"), 0.0, 0.0)


class TestNvolRoundtrip:
    def test_volume_roundtrip(self, rng, tmp_path):
        v = make_volume(rng.normal(size=(3, 4, 5)).astype(np.float32),
                        spacing=(1.0, 1.0, 2.0), origin=(-4.0, 1.0, 0.5))
        path = tmp_path / "vol.nvol"
        save_nvol(v, path)
        back, header = load_nvol(path)
        npt.assert_array_equal(back.data, v.data)
        assert back.dims == v.dims and back.spacing_mm == v.spacing_mm
        assert back.unit is v.unit
        assert header["dtype"] == "f32le"

    def test_payload_is_x_fastest(self, tmp_path):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)  # (z, y, x)
        v = make_volume(data)
        path = tmp_path / "order.nvol"
        save_nvol(v, path)
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        npt.assert_array_equal(raw[:4], data[0, 0, :])  # x varies fastest

    def test_luminance_export_rounds(self, tmp_path):
        v = make_volume(np.array([[[1.4, 1.6]]]), unit=Unit.LUMINANCE)
        path = tmp_path / "lum.nvol"
        save_nvol(v, path)
        back, _ = load_nvol(path)
        npt.assert_array_equal(back.data, [[[1.0, 2.0]]])

    def test_truncated_payload_rejected(self, rng, tmp_path):
        v = make_volume(rng.normal(size=(2, 2, 2)))
        path = tmp_path / "bad.nvol"
        save_nvol(v, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(InvalidVolumeError):
            load_nvol(path)

    def test_mask_roundtrip(self, rng, tmp_path):
        m = Mask(rng.random((3, 4, 5)) > 0.5, (1.0, 1.0, 2.0))
        save_mask_nvol(m, tmp_path / "m.nvol")
        back = load_mask_nvol(tmp_path / "m.nvol")
        npt.assert_array_equal(back.bits, m.bits)


@settings(max_examples=30, deadline=None)
@given(hu=st.floats(min_value=-5000, max_value=5000, allow_nan=False))
def test_clip_rescale_range_property(hu):
    out = clip_and_rescale(make_volume(np.full((1, 1, 1), hu)))
    assert 0.0 <= out.data[0, 0, 0] <= 255.0
