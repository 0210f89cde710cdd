"""Per-voxel mono-exponential DWI fitting: S(b) = S0 * exp(-b * ADC).

ADC maps are reported in units of 1e-6 mm^2/s, i.e. the decay coefficient
in mm^2/s multiplied by 1e6. All fitting arithmetic runs in float64 and the
returned maps stay float64 in memory; HVOL storage narrows them to float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from dwih._parallel import map_chunks
from dwih.errors import ArityError, InputError
from dwih.volume import Volume3D, check_same_geometry

ADC_SCALE = 1e6
ADC_MAX = 10000.0
SIGNAL_EPS = 1e-6
DEFAULT_TARGET_B = 2000.0

# admissible b-value ranges for the (low, high) meta-information pair
LOW_B_RANGE = (0.0, 200.0)
HIGH_B_RANGE = (600.0, 2000.0)

# Levenberg-Marquardt controls
LM_LAMBDA0 = 1e-3
LM_FACTOR = 10.0
LM_XTOL = 1e-8
LM_MAX_ITER = 100

CLAMPED_SENTINEL = -1.0


@dataclass(frozen=True)
class MetaInfo:
    """The (low_b, high_b) pair a DWI sample was computed from."""

    low_b: float
    high_b: float

    def __post_init__(self):
        lo, hi = float(self.low_b), float(self.high_b)
        if not LOW_B_RANGE[0] <= lo <= LOW_B_RANGE[1]:
            raise InputError(f"low_b={lo} outside {LOW_B_RANGE}")
        if not HIGH_B_RANGE[0] <= hi <= HIGH_B_RANGE[1]:
            raise InputError(f"high_b={hi} outside {HIGH_B_RANGE}")
        object.__setattr__(self, "low_b", lo)
        object.__setattr__(self, "high_b", hi)

    @classmethod
    def from_b_values(cls, b_values) -> "MetaInfo":
        """Pick the low b closest to 50 and the high b closest to 1000."""
        lows = [b for b in b_values if LOW_B_RANGE[0] <= b <= LOW_B_RANGE[1]]
        highs = [b for b in b_values if HIGH_B_RANGE[0] <= b <= HIGH_B_RANGE[1]]
        if not lows or not highs:
            raise InputError(f"b-values {list(b_values)} lack an admissible low/high pair")
        low = min(lows, key=lambda b: (abs(b - 50.0), b))
        high = min(highs, key=lambda b: (abs(b - 1000.0), b))
        return cls(low, high)


@dataclass(frozen=True)
class DwiObservation:
    b_value: float
    volume: Volume3D

    def __post_init__(self):
        b = float(self.b_value)
        if not np.isfinite(b) or b < 0:
            raise InputError(f"b-value must be non-negative, got {self.b_value}")
        object.__setattr__(self, "b_value", b)


@dataclass(frozen=True)
class DwiSeries:
    """Observations of one sample sorted by b-value."""

    observations: tuple[DwiObservation, ...]
    meta: MetaInfo | None = None

    def __post_init__(self):
        obs = tuple(sorted(self.observations, key=lambda o: o.b_value))
        if len(obs) < 2:
            raise ArityError(f"need at least two observations, got {len(obs)}")
        bs = [o.b_value for o in obs]
        if len(set(bs)) != len(bs):
            raise InputError(f"duplicate b-values in {bs}")
        check_same_geometry(*(o.volume for o in obs), what="DWI observations")
        object.__setattr__(self, "observations", obs)
        if self.meta is None:
            try:
                object.__setattr__(self, "meta", MetaInfo.from_b_values(bs))
            except InputError:
                pass

    @classmethod
    def from_volumes(cls, volumes: dict, meta: MetaInfo | None = None) -> "DwiSeries":
        return cls(tuple(DwiObservation(b, v) for b, v in volumes.items()), meta)

    @property
    def b_values(self) -> tuple[float, ...]:
        return tuple(o.b_value for o in self.observations)

    @property
    def geometry(self) -> Volume3D:
        return self.observations[0].volume

    def volume_at(self, b_value: float) -> Volume3D:
        for o in self.observations:
            if o.b_value == float(b_value):
                return o.volume
        raise InputError(f"no observation at b={b_value}; have {self.b_values}")

    def pair(self, low_b: float, high_b: float) -> "DwiSeries":
        """Two-observation sub-series for one (low, high) pair."""
        return DwiSeries(
            (DwiObservation(low_b, self.volume_at(low_b)), DwiObservation(high_b, self.volume_at(high_b))),
            MetaInfo(low_b, high_b),
        )

    def admissible_pairs(self) -> list[tuple[float, float]]:
        lows = [b for b in self.b_values if LOW_B_RANGE[0] <= b <= LOW_B_RANGE[1]]
        highs = [b for b in self.b_values if HIGH_B_RANGE[0] <= b <= HIGH_B_RANGE[1]]
        return [(lo, hi) for lo, hi in product(lows, highs) if lo < hi]


@dataclass(frozen=True)
class AdcFitResult:
    """Fitted maps. ``residual_rms`` is -1 where a signal had to be clamped."""

    adc: Volume3D
    s0: Volume3D
    residual_rms: Volume3D
    b_values: tuple[float, ...] = field(default=())
    method: str = "two-point"

    @property
    def clamped(self) -> np.ndarray:
        return self.residual_rms.data == CLAMPED_SENTINEL


def _stack_signals(series: DwiSeries) -> tuple[np.ndarray, np.ndarray]:
    b = np.array(series.b_values, dtype=np.float64)
    y = np.stack([np.asarray(o.volume.data, dtype=np.float64).ravel() for o in series.observations])
    return b, y


def _residual_rms(b, y, s0, adc6):
    acc = np.zeros_like(s0)
    for bi, yi in zip(b, y):
        acc += (s0 * np.exp(-bi * adc6 / ADC_SCALE) - yi) ** 2
    return np.sqrt(acc / len(b))


def _best_s0(b, y, adc6):
    """Least-squares S0 for a fixed decay rate."""
    num = np.zeros_like(adc6)
    den = np.zeros_like(adc6)
    for bi, yi in zip(b, y):
        e = np.exp(-bi * adc6 / ADC_SCALE)
        num += yi * e
        den += e * e
    return np.maximum(num / den, 0.0)


def _fit_two_point(b, y):
    clamped = (y[0] < SIGNAL_EPS) | (y[1] < SIGNAL_EPS)
    s_lo = np.maximum(y[0], SIGNAL_EPS)
    s_hi = np.maximum(y[1], SIGNAL_EPS)
    raw = np.log(s_lo / s_hi) / (b[1] - b[0])
    adc6 = raw * ADC_SCALE
    out_of_range = (adc6 < 0.0) | (adc6 > ADC_MAX)
    adc6 = np.clip(adc6, 0.0, ADC_MAX)
    s0 = s_lo * np.exp(b[0] * adc6 / ADC_SCALE)
    resid = np.zeros_like(s0)
    if out_of_range.any():
        resid[out_of_range] = _residual_rms(b, y[:, out_of_range], s0[out_of_range], adc6[out_of_range])
    resid[clamped] = CLAMPED_SENTINEL
    return adc6, s0, resid


def log_linear_fit(b, y):
    """Ordinary least squares of ln S against b for each column of ``y``.

    Returns ``(s0, adc6)`` without any clamping of the decay rate.
    """
    ly = np.log(np.maximum(y, SIGNAL_EPS))
    b_mean = float(np.mean(b))
    ly_mean = np.zeros(y.shape[1])
    for lyi in ly:
        ly_mean += lyi
    ly_mean /= len(b)
    sxy = np.zeros(y.shape[1])
    sxx = 0.0
    for bi, lyi in zip(b, ly):
        sxy += (bi - b_mean) * (lyi - ly_mean)
        sxx += (bi - b_mean) ** 2
    raw = -sxy / sxx
    return np.exp(ly_mean + raw * b_mean), raw * ADC_SCALE


def _lm_fit(b, y):
    """Vectorized Levenberg-Marquardt, one independent 2-parameter problem per column."""
    bb = b / ADC_SCALE
    s0, adc6 = log_linear_fit(b, y)
    lam = np.full_like(s0, LM_LAMBDA0)
    active = np.arange(s0.size)

    def cost(s, a, yy):
        c = np.zeros_like(s)
        for bi, yi in zip(bb, yy):
            c += (s * np.exp(-bi * a) - yi) ** 2
        return c

    cur_cost = cost(s0, adc6, y)
    for _ in range(LM_MAX_ITER):
        if active.size == 0:
            break
        s, a, yy, lm = s0[active], adc6[active], y[:, active], lam[active]
        a11 = np.zeros_like(s)
        a12 = np.zeros_like(s)
        a22 = np.zeros_like(s)
        g1 = np.zeros_like(s)
        g2 = np.zeros_like(s)
        for bi, yi in zip(bb, yy):
            e = np.exp(-bi * a)
            r = s * e - yi
            j1 = e
            j2 = -bi * s * e
            a11 += j1 * j1
            a12 += j1 * j2
            a22 += j2 * j2
            g1 += j1 * r
            g2 += j2 * r
        d11 = a11 * (1.0 + lm)
        d22 = a22 * (1.0 + lm)
        det = d11 * d22 - a12 * a12
        singular = ~(np.abs(det) > 0)
        det = np.where(singular, 1.0, det)
        ds = np.where(singular, 0.0, -(d22 * g1 - a12 * g2) / det)
        da = np.where(singular, 0.0, -(d11 * g2 - a12 * g1) / det)

        new_s, new_a = s + ds, a + da
        new_cost = cost(new_s, new_a, yy)
        accept = new_cost <= cur_cost[active]
        idx = active[accept]
        s0[idx] = new_s[accept]
        adc6[idx] = new_a[accept]
        cur_cost[idx] = new_cost[accept]
        lam[active] = np.where(accept, lm / LM_FACTOR, lm * LM_FACTOR)

        small = (np.abs(ds) <= LM_XTOL * np.maximum(np.abs(s), 1e-12)) & (
            np.abs(da) <= LM_XTOL * np.maximum(np.abs(a), 1e-6)
        )
        active = active[~(small | singular)]

    out_of_range = (adc6 < 0.0) | (adc6 > ADC_MAX)
    adc6 = np.clip(adc6, 0.0, ADC_MAX)
    if out_of_range.any():
        s0[out_of_range] = _best_s0(b, y[:, out_of_range], adc6[out_of_range])
    s0 = np.maximum(s0, 0.0)
    resid = _residual_rms(b, y, s0, adc6)
    resid[(y < SIGNAL_EPS).any(axis=0)] = CLAMPED_SENTINEL
    return adc6, s0, resid


def fit_adc(series: DwiSeries, method: str = "auto", workers: int | None = None) -> AdcFitResult:
    """Fit S0 and ADC per voxel.

    With exactly two observations the log-linear solution is exact. With
    three or more, ``method="auto"`` runs a joint Levenberg-Marquardt fit
    over all of them, started from the log-linear regression.

    Parameters
    ----------
    series : DwiSeries
    method : {"auto", "two-point", "lm"}
        ``"lm"`` forces the iterative fit even for two observations.
    workers : int, optional
        Thread count for slab-parallel fitting; defaults to ``DWIH_THREADS``.
        Output is bit-identical for any value.
    """
    if method not in ("auto", "two-point", "lm"):
        raise InputError(f"unknown fit method {method!r}")
    if not isinstance(series, DwiSeries):
        raise InputError("fit_adc expects a DwiSeries")
    b, y = _stack_signals(series)
    if method == "two-point" and len(b) != 2:
        raise ArityError(f"two-point fit needs exactly 2 observations, got {len(b)}")
    use_lm = method == "lm" or (method == "auto" and len(b) > 2)
    solver = _lm_fit if use_lm else _fit_two_point

    parts = map_chunks(lambda lo, hi: solver(b, y[:, lo:hi]), y.shape[1], workers)
    adc6, s0, resid = (np.concatenate(p) for p in zip(*parts))

    ref = series.geometry
    shape = ref.data.shape
    return AdcFitResult(
        adc=Volume3D(adc6.reshape(shape), ref.spacing),
        s0=Volume3D(s0.reshape(shape), ref.spacing),
        residual_rms=Volume3D(resid.reshape(shape), ref.spacing),
        b_values=series.b_values,
        method="lm" if use_lm else "two-point",
    )


def fit_adc_pairs(series: DwiSeries, workers: int | None = None) -> dict[tuple[float, float], AdcFitResult]:
    """Two-point fits for every admissible (low, high) pair in the series."""
    return {pair: fit_adc(series.pair(*pair), workers=workers) for pair in series.admissible_pairs()}


def extrapolate_dwi(fit: AdcFitResult, target_b: float = DEFAULT_TARGET_B) -> Volume3D:
    """Evaluate the fitted decay at ``target_b`` (sec/mm^2)."""
    target_b = float(target_b)
    if not np.isfinite(target_b) or target_b < 0:
        raise InputError(f"target b-value must be non-negative, got {target_b}")
    s0 = np.asarray(fit.s0.data, dtype=np.float64)
    adc6 = np.asarray(fit.adc.data, dtype=np.float64)
    return fit.s0.with_data(s0 * np.exp(-target_b * adc6 / ADC_SCALE))
