import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwih.errors import ArityError, GeometryError, InputError
from dwih.signal_model import (
    CLAMPED_SENTINEL,
    AdcFitResult,
    DwiObservation,
    DwiSeries,
    MetaInfo,
    extrapolate_dwi,
    fit_adc,
    fit_adc_pairs,
)
from dwih.volume import Volume3D

SP = (0.5, 0.5, 3.0)

# S0 = 1000, ADC = 1.0e-3 mm^2/s, evaluated by hand
S50 = 951.229424500714
S800 = 449.3289641172216
S2000_FROM_1000_1000 = 135.3352832366127


def const_series(values: dict, shape=(2, 3, 4), meta=None):
    return DwiSeries.from_volumes({b: Volume3D(np.full(shape, v, dtype=np.float64), SP) for b, v in values.items()}, meta)


def model_series(b_values, s0, adc6, meta=None):
    s0 = np.asarray(s0, dtype=np.float64)
    adc6 = np.asarray(adc6, dtype=np.float64)
    return DwiSeries.from_volumes({b: Volume3D(s0 * np.exp(-b * adc6 * 1e-6), SP) for b in b_values}, meta)


def log_linear_oracle(b, y):
    """Closed-form regression of ln S on b via numpy.polyfit, per voxel."""
    slope, intercept = np.polyfit(np.asarray(b, float), np.log(y), 1)
    return np.exp(intercept), -slope * 1e6


class TestFitAdc:
    def test_constant_signal_has_zero_decay(self):
        fit = fit_adc(const_series({0: 100.0, 800: 100.0}))
        assert np.all(fit.adc.data == 0.0)
        assert np.all(fit.s0.data == 100.0)
        assert np.all(fit.residual_rms.data == 0.0)

    def test_two_point_inverts_forward_model(self):
        fit = fit_adc(const_series({50: S50, 800: S800}))
        np.testing.assert_allclose(fit.adc.data, 1000.0, rtol=1e-9)
        np.testing.assert_allclose(fit.s0.data, 1000.0, rtol=1e-9)
        assert fit.method == "two-point"

    def test_three_points_lm_matches_log_linear_oracle(self):
        fit = fit_adc(const_series({50: S50, 800: S800, 1500: 1000 * np.exp(-1.5)}))
        assert fit.method == "lm"
        np.testing.assert_allclose(fit.adc.data, 1000.0, rtol=1e-7)
        np.testing.assert_allclose(fit.s0.data, 1000.0, rtol=1e-7)

    def test_lm_agrees_with_closed_form_on_varied_voxels(self, rng):
        s0 = rng.uniform(200, 2000, (3, 4, 5))
        adc6 = rng.uniform(100, 3000, (3, 4, 5))
        bs = (0, 50, 400, 800, 1500)
        series = model_series(bs, s0, adc6)
        fit = fit_adc(series)
        y = np.stack([s0 * np.exp(-b * adc6 * 1e-6) for b in bs]).reshape(len(bs), -1)
        o_s0, o_adc = log_linear_oracle(bs, y)
        np.testing.assert_allclose(fit.adc.data.ravel(), o_adc, rtol=1e-7)
        np.testing.assert_allclose(fit.s0.data.ravel(), o_s0, rtol=1e-7)

    def test_lm_on_noisy_data_matches_scipy_curve_fit(self, rng):
        from scipy.optimize import curve_fit

        bs = np.array([0.0, 50.0, 400.0, 800.0, 1500.0])
        y = 1000 * np.exp(-bs * 1.2e-3) * (1 + 0.03 * rng.standard_normal(bs.size))
        series = DwiSeries.from_volumes({b: Volume3D(np.full((1, 1, 1), v), SP) for b, v in zip(bs, y)})
        fit = fit_adc(series)
        ref, _ = curve_fit(lambda b, s, a: s * np.exp(-b * a * 1e-6), bs, y, p0=[1000, 1000])
        np.testing.assert_allclose([fit.s0.data.item(), fit.adc.data.item()], ref, rtol=1e-6)
        assert fit.residual_rms.data.item() > 0

    def test_forced_lm_on_two_points_is_exact(self):
        fit = fit_adc(const_series({50: S50, 800: S800}), method="lm")
        np.testing.assert_allclose(fit.adc.data, 1000.0, rtol=1e-9)

    def test_input_order_does_not_matter(self):
        obs = (
            DwiObservation(800, Volume3D(np.full((1, 1, 2), S800), SP)),
            DwiObservation(50, Volume3D(np.full((1, 1, 2), S50), SP)),
        )
        fit = fit_adc(DwiSeries(obs))
        np.testing.assert_allclose(fit.adc.data, 1000.0, rtol=1e-9)

    def test_zero_signal_is_clamped_and_flagged(self):
        series = DwiSeries.from_volumes(
            {
                0: Volume3D(np.array([[[100.0, 0.0, 5.0]]]), SP),
                800: Volume3D(np.array([[[50.0, 0.0, 0.0]]]), SP),
            }
        )
        fit = fit_adc(series)
        assert np.all(np.isfinite(fit.adc.data))
        assert fit.residual_rms.data[0, 0, 0] == 0.0
        assert fit.residual_rms.data[0, 0, 1] == CLAMPED_SENTINEL
        assert fit.residual_rms.data[0, 0, 2] == CLAMPED_SENTINEL
        np.testing.assert_array_equal(fit.clamped[0, 0], [False, True, True])
        # 5 -> 1e-6 over 800 s/mm^2 would be ~19000e-6, so the ADC clamp bites
        assert fit.adc.data[0, 0, 2] == 10000.0

    def test_rising_signal_clamps_adc_to_zero(self):
        fit = fit_adc(const_series({0: 100.0, 800: 120.0}))
        assert np.all(fit.adc.data == 0.0)
        assert np.all(fit.s0.data >= 0)
        assert np.all(fit.residual_rms.data > 0)

    def test_errors(self):
        v = Volume3D(np.ones((1, 1, 1)), SP)
        with pytest.raises(ArityError):
            DwiSeries((DwiObservation(0, v),))
        with pytest.raises(InputError):
            DwiSeries((DwiObservation(0, v), DwiObservation(0, v)))
        with pytest.raises(GeometryError):
            DwiSeries((DwiObservation(0, v), DwiObservation(800, Volume3D(np.ones((1, 1, 2)), SP))))
        with pytest.raises(GeometryError):
            DwiSeries((DwiObservation(0, v), DwiObservation(800, Volume3D(np.ones((1, 1, 1)), (1, 1, 1)))))
        with pytest.raises(InputError):
            DwiObservation(-1, v)
        with pytest.raises(ArityError):
            fit_adc(const_series({0: 1.0, 50: 1.0, 800: 1.0}), method="two-point")

    def test_determinism_across_workers(self, rng):
        # large enough to be split into several 65536-voxel chunks
        s0 = rng.uniform(100, 2000, (12, 120, 120))
        adc6 = rng.uniform(0, 3000, s0.shape)
        noisy = {
            b: Volume3D(s0 * np.exp(-b * adc6 * 1e-6) * (1 + 0.05 * rng.standard_normal(s0.shape)), SP)
            for b in (0, 100, 800, 1400)
        }
        series = DwiSeries.from_volumes(noisy)
        a = fit_adc(series, workers=1)
        b = fit_adc(series, workers=7)
        for name in ("adc", "s0", "residual_rms"):
            assert getattr(a, name).data.tobytes() == getattr(b, name).data.tobytes()

    def test_pairwise_fits(self):
        series = model_series((0, 50, 800, 1500), np.full((1, 2, 2), 900.0), np.full((1, 2, 2), 1200.0))
        pairs = fit_adc_pairs(series)
        assert set(pairs) == {(0.0, 800.0), (0.0, 1500.0), (50.0, 800.0), (50.0, 1500.0)}
        for fit in pairs.values():
            np.testing.assert_allclose(fit.adc.data, 1200.0, rtol=1e-9)


class TestMeta:
    def test_ranges(self):
        MetaInfo(0, 600)
        MetaInfo(200, 2000)
        with pytest.raises(InputError):
            MetaInfo(250, 800)
        with pytest.raises(InputError):
            MetaInfo(50, 500)

    def test_default_pair_closest_to_50_and_1000(self):
        assert MetaInfo.from_b_values([0, 50, 100, 800, 1500]) == MetaInfo(50, 800)
        assert MetaInfo.from_b_values([0, 1000, 2000]) == MetaInfo(0, 1000)


class TestExtrapolate:
    def test_zero_decay_is_identity(self):
        fit = AdcFitResult(
            Volume3D(np.zeros((1, 2, 2)), SP), Volume3D(np.full((1, 2, 2), 500.0), SP), Volume3D(np.zeros((1, 2, 2)), SP)
        )
        assert np.all(extrapolate_dwi(fit).data == 500.0)

    def test_b2000_value(self):
        fit = AdcFitResult(
            Volume3D(np.full((1, 1, 1), 1000.0), SP), Volume3D(np.full((1, 1, 1), 1000.0), SP), Volume3D(np.zeros((1, 1, 1)), SP)
        )
        np.testing.assert_allclose(extrapolate_dwi(fit, 2000).data, S2000_FROM_1000_1000, rtol=1e-12)

    def test_negative_target_rejected(self):
        fit = fit_adc(const_series({0: 100.0, 800: 100.0}))
        with pytest.raises(InputError):
            extrapolate_dwi(fit, -1)

    def test_round_trip_at_observed_b(self, rng):
        s0 = rng.uniform(100, 2000, (2, 5, 5))
        adc6 = rng.uniform(0, 3000, (2, 5, 5))
        series = model_series((50, 800, 1500), s0, adc6)
        fit = fit_adc(series)
        for o in series.observations:
            np.testing.assert_allclose(extrapolate_dwi(fit, o.b_value).data, o.volume.data, rtol=1e-9)


pos = st.floats(1.0, 5000.0)


@settings(max_examples=200, deadline=None)
@given(s_lo=pos, s_hi=pos, b_lo=st.sampled_from([0, 50, 100, 150, 200]), b_hi=st.sampled_from([600, 800, 1000, 1500, 2000]))
def test_two_point_reextrapolation_reproduces_input(s_lo, s_hi, b_lo, b_hi):
    # only where the ADC clamp is inactive
    adc6 = np.log(s_lo / s_hi) / (b_hi - b_lo) * 1e6
    if not 0 <= adc6 <= 10000:
        return
    fit = fit_adc(const_series({b_lo: s_lo, b_hi: s_hi}, shape=(1, 1, 1)))
    np.testing.assert_allclose(extrapolate_dwi(fit, b_lo).data, s_lo, rtol=1e-12)
    np.testing.assert_allclose(extrapolate_dwi(fit, b_hi).data, s_hi, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(s_lo=pos, s_hi=pos, c=st.floats(1e-3, 1e3))
def test_scaling_signals_scales_s0_only(s_lo, s_hi, c):
    a = fit_adc(const_series({50: s_lo, 800: s_hi}, shape=(1, 1, 1)))
    b = fit_adc(const_series({50: c * s_lo, 800: c * s_hi}, shape=(1, 1, 1)))
    np.testing.assert_allclose(b.adc.data, a.adc.data, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(b.s0.data, c * a.s0.data, rtol=1e-9)
