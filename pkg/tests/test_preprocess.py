import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwih.errors import GeometryError, InputError
from dwih.preprocess import (
    DEFAULT_DIMS,
    DEFAULT_SPACING,
    lower_median,
    normalize_adc,
    normalize_dwi_b2000,
    normalize_t2w,
    percentile_type7,
    preprocess_case,
    resample,
)
from dwih.volume import Volume3D

SP = (0.5, 0.5, 3.0)


def vol(data, spacing=SP):
    return Volume3D(np.asarray(data), spacing)


class TestResample:
    def test_default_grid(self):
        assert DEFAULT_DIMS == (240, 240, 30)
        assert DEFAULT_SPACING == (0.5, 0.5, 3.0)
        out = resample(vol(np.ones((4, 8, 8))))
        assert out.dims == (240, 240, 30)
        assert out.spacing == (0.5, 0.5, 3.0)

    def test_identity_is_bit_exact(self, rng):
        v = vol(rng.standard_normal((5, 7, 9)))
        out = resample(v, v.dims, v.spacing)
        assert out.data.tobytes() == v.data.tobytes()

    def test_ramp_matches_analytic_interpolation(self):
        n = 11
        ramp = 3.0 * np.arange(n) + 2.0
        v = Volume3D(ramp.reshape(1, 1, n), (1.0, 1.0, 1.0))
        for n_out, s_out in ((6, 2.0), (7, 1.7), (5, 2.3)):
            out = resample(v, (n_out, 1, 1), (s_out, 1.0, 1.0))
            # physical position of each output voxel, in input index units
            pos = (np.arange(n_out) - (n_out - 1) / 2) * s_out + (n - 1) / 2
            expected = np.where((pos >= 0) & (pos <= n - 1), 3.0 * pos + 2.0, 0.0)
            np.testing.assert_allclose(out.data.ravel(), expected, atol=1e-6, rtol=0)

    def test_matches_scipy_map_coordinates(self, rng):
        from scipy import ndimage

        v = Volume3D(rng.random((5, 7, 9)), (1.0, 1.0, 2.0))
        out = resample(v, (13, 11, 4), (0.7, 0.6, 2.5))
        zz = (np.arange(4) - 1.5) * 2.5 / 2 + 2
        yy = (np.arange(11) - 5) * 0.6 + 3
        xx = (np.arange(13) - 6) * 0.7 + 4
        grid = np.meshgrid(zz, yy, xx, indexing="ij")
        ref = ndimage.map_coordinates(v.data, grid, order=1, mode="constant", cval=0.0)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_padding_is_zero(self):
        v = Volume3D(np.ones((1, 4, 4)), (1.0, 1.0, 3.0))
        out = resample(v, (8, 8, 1), (1.0, 1.0, 3.0))
        assert out.data[0, 0, 0] == 0.0
        assert out.data[0, 2:6, 2:6].min() == 1.0
        assert out.data.sum() == 16.0

    def test_center_crop(self, rng):
        data = rng.random((1, 10, 10))
        out = resample(Volume3D(data, (1, 1, 1)), (4, 4, 1), (1, 1, 1))
        np.testing.assert_array_equal(out.data, data[:, 3:7, 3:7])

    def test_mask_requires_nearest(self):
        m = vol(np.ones((2, 2, 2), dtype=np.uint8))
        with pytest.raises(InputError):
            resample(m, (3, 3, 3), SP, "linear")
        out = resample(m, (3, 3, 3), SP, "nearest")
        assert out.data.dtype == np.uint8

    def test_bad_targets(self):
        v = vol(np.ones((2, 2, 2)))
        with pytest.raises(InputError):
            resample(v, (0, 2, 2), SP)
        with pytest.raises(InputError):
            resample(v, (2, 2, 2), (1, -1, 1))
        with pytest.raises(InputError):
            resample(v, (2, 2, 2), SP, "cubic")


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    dims=st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6)),
    spacing=st.tuples(st.floats(0.2, 3.0), st.floats(0.2, 3.0), st.floats(0.5, 5.0)),
)
def test_nearest_mask_values_come_from_input(seed, dims, spacing):
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 4, (5, 9, 8)).astype(np.uint8)
    data[0, 0, 0] = 0
    out = resample(Volume3D(data, (0.8, 0.9, 2.0)), dims, spacing, "nearest")
    assert set(np.unique(out.data)) <= set(np.unique(data))
    assert out.dims == dims


class TestNormalizeT2w:
    def test_percentile_endpoints_map_to_zero_and_one(self, rng):
        # 2001 voxels: the 0.05th / 99.95th percentiles fall on ranks 1 and 1999
        values = np.sort(rng.uniform(0, 500, 2001))
        v = vol(rng.permutation(values).reshape(1, 1, 2001))
        out = normalize_t2w(v)
        assert out.data[v.data == values[1]].item() == 0.0
        assert out.data[v.data == values[1999]].item() == 1.0
        assert out.data.min() == 0.0 and out.data.max() == 1.0

    def test_percentile_definition_is_type7(self, rng):
        x = rng.standard_normal(777)
        for q in (0.05, 3.3, 50, 99.95):
            assert percentile_type7(x, q) == pytest.approx(np.percentile(x, q, method="linear"), abs=1e-12)

    def test_constant_volume_gives_zeros(self):
        out = normalize_t2w(vol(np.full((2, 3, 4), 7.0)))
        assert np.all(out.data == 0.0)

    def test_uniform_ramp_midpoint(self):
        ramp = np.linspace(0, 1000, 1_000_000)
        out = normalize_t2w(vol(ramp.reshape(100, 100, 100)))
        mid = np.argmin(np.abs(ramp - 500))
        assert out.data.ravel()[mid] == pytest.approx(0.5, abs=1e-3)

    @pytest.mark.parametrize("n", [2001, 4001, 20001])
    def test_idempotent_and_bounded(self, rng, n):
        # (n - 1) * 0.0005 is an integer, so both percentile ranks land on
        # voxels the first pass already saturated
        v = vol(rng.lognormal(3, 1, (1, 1, n)))
        once = normalize_t2w(v)
        twice = normalize_t2w(once)
        assert once.data.min() >= 0 and once.data.max() <= 1
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)
        assert once.spacing == v.spacing and once.dims == v.dims


class TestNormalizeAdc:
    @pytest.mark.parametrize("value,expected", [(3000.0, 1.0), (0.0, 0.0), (1500.0, 0.5), (-20.0, 0.0), (6000.0, 2.0)])
    def test_values(self, value, expected):
        assert normalize_adc(vol(np.full((1, 1, 1), value))).data.item() == expected

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0.01, 100), seed=st.integers(0, 1000))
    def test_linear(self, a, seed):
        v = np.random.default_rng(seed).uniform(0, 5000, (1, 2, 3))
        np.testing.assert_allclose(normalize_adc(vol(a * v)).data, a * normalize_adc(vol(v)).data, rtol=1e-12)


class TestNormalizeB2000:
    def test_boundary_maps_to_one(self):
        mask = vol(np.ones((1, 2, 2), dtype=np.uint8))
        b0 = vol(np.full((1, 2, 2), 100.0))
        for rc in (1.0, 4.0, 7.5):
            v = vol(np.full((1, 2, 2), 400.0 * rc / 4))
            # median 100, constant rc: 100*rc / (100*rc) = 1 exactly
            assert np.all(normalize_dwi_b2000(v, b0, mask, rc).data == 1.0)

    def test_zero_and_clip(self):
        mask = vol(np.ones((1, 1, 3), dtype=np.uint8))
        b0 = vol(np.full((1, 1, 3), 50.0))
        out = normalize_dwi_b2000(vol(np.array([[[0.0, 100.0, 900.0]]])), b0, mask, 4.0)
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.5, 1.0])

    def test_two_step_rule_uses_masked_lower_median(self):
        b0 = vol(np.array([[[10.0, 20.0, 30.0, 40.0, 1000.0]]]))
        mask = vol(np.array([[[1, 1, 1, 1, 0]]], dtype=np.uint8))
        v = vol(np.array([[[20.0, 40.0, 80.0, 0.0, 0.0]]]))
        # lower median of {10, 20, 30, 40} is 20; then divide by 2
        out = normalize_dwi_b2000(v, b0, mask, 2.0)
        np.testing.assert_allclose(out.data.ravel(), [0.5, 1.0, 1.0, 0.0, 0.0])
        assert lower_median([4, 1, 3, 2]) == 2

    def test_errors(self):
        mask = vol(np.zeros((1, 1, 2), dtype=np.uint8))
        b0 = vol(np.ones((1, 1, 2)))
        with pytest.raises(InputError):
            normalize_dwi_b2000(b0, b0, mask)
        with pytest.raises(InputError):
            normalize_dwi_b2000(b0, vol(np.zeros((1, 1, 2))), vol(np.ones((1, 1, 2), dtype=np.uint8)))
        with pytest.raises(GeometryError):
            normalize_dwi_b2000(vol(np.ones((1, 1, 3))), b0, mask)


def test_preprocess_case_outputs(rng):
    shape = (6, 40, 40)
    sp = (1.0, 1.0, 3.0)
    mask = np.zeros(shape, dtype=np.uint8)
    mask[2:4, 15:25, 15:25] = 1
    case = dict(
        t2w=Volume3D(rng.uniform(50, 400, shape), sp),
        dwi_b2000=Volume3D(rng.uniform(0, 300, shape), sp),
        adc=Volume3D(rng.uniform(0, 3000, shape), sp),
        b0=Volume3D(np.full(shape, 250.0), sp),
        mask=Volume3D(mask, sp),
    )
    out = preprocess_case(**case, target_dims=(60, 60, 6), target_spacing=(0.5, 0.5, 3.0))
    for name in ("t2w", "adc", "dwi_b2000", "mask"):
        assert out[name].dims == (60, 60, 6)
    assert out["t2w"].data.min() >= 0 and out["t2w"].data.max() <= 1
    assert out["dwi_b2000"].data.max() <= 1
    assert out["mask"].data.dtype == np.uint8
    assert out["provenance"]["range_constant"] == 4.0
    assert out["provenance"]["b0_gland_median"] == 250.0
