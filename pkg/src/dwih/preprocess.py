"""Geometric standardization and modality-specific intensity normalization."""

from __future__ import annotations

import numpy as np

from dwih.errors import InputError
from dwih.volume import Volume3D, check_same_geometry

DEFAULT_DIMS = (240, 240, 30)
DEFAULT_SPACING = (0.5, 0.5, 3.0)
T2W_PERCENTILES = (0.05, 99.95)
ADC_NORM_FACTOR = 3000.0
DEFAULT_RANGE_CONSTANT = 4.0


def _source_coords(n_out: int, s_out: float, n_in: int, s_in: float) -> np.ndarray:
    # both grids share their physical centre; returns fractional input indices
    return (np.arange(n_out, dtype=np.float64) - (n_out - 1) / 2.0) * (s_out / s_in) + (n_in - 1) / 2.0


def resample(
    vol: Volume3D,
    target_dims=DEFAULT_DIMS,
    target_spacing=DEFAULT_SPACING,
    mode: str = "linear",
) -> Volume3D:
    """Centre-crop/pad and resample onto a new grid in one mapping.

    The output grid is centred on the physical centre of the input.
    ``mode="linear"`` is trilinear; ``mode="nearest"`` picks the nearest
    voxel and is required for masks. Samples falling outside the input's
    voxel-centre hull are 0.
    """
    target_dims = tuple(int(d) for d in target_dims)
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise InputError(f"target dims must be three positive integers, got {target_dims}")
    if len(target_spacing) != 3 or not all(s > 0 for s in target_spacing):
        raise InputError(f"target spacing must be positive, got {target_spacing}")
    if mode not in ("linear", "nearest"):
        raise InputError(f"unknown resampling mode {mode!r}")
    if vol.is_mask and mode != "nearest":
        raise InputError("masks must be resampled with mode='nearest'")

    # per-axis index arrays in [z, y, x] order
    axes = [
        _source_coords(n_out, s_out, n_in, s_in)
        for n_out, s_out, n_in, s_in in zip(target_dims, target_spacing, vol.dims, vol.spacing)
    ][::-1]
    shape_in = vol.data.shape

    if mode == "nearest":
        out = vol.data
        for axis, coords in enumerate(axes):
            idx = np.floor(coords + 0.5).astype(np.int64)
            valid = (idx >= 0) & (idx < shape_in[axis])
            out = np.take(out, np.clip(idx, 0, shape_in[axis] - 1), axis=axis)
            if not valid.all():
                out = out.copy()
                sl = [slice(None)] * 3
                sl[axis] = ~valid
                out[tuple(sl)] = 0
        return Volume3D(out, target_spacing)

    # trilinear interpolation is separable, so three 1D passes equal one 3D pass
    out = np.asarray(vol.data, dtype=np.float64)
    for axis, coords in enumerate(axes):
        out = _interp_axis(out, coords, axis)
    return Volume3D(out, target_spacing)


def _interp_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    eps = 1e-9
    inside = (coords >= -eps) & (coords <= n - 1 + eps)
    c = np.clip(coords, 0.0, n - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = c - lo
    bshape = [1, 1, 1]
    bshape[axis] = -1
    w = w.reshape(bshape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    # exact passthrough when the sample lands on a voxel centre
    out = np.where(w == 0.0, a, a * (1.0 - w) + b * w)
    return out * inside.reshape(bshape)


def percentile_type7(values: np.ndarray, q: float) -> float:
    """Linear interpolation between closest ranks on a full sort."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel(), kind="stable")
    pos = (len(v) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    frac = pos - lo
    if frac == 0.0:
        return float(v[lo])
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel(), kind="stable")
    return float(v[(len(v) - 1) // 2])


def normalize_t2w(vol: Volume3D, percentiles=T2W_PERCENTILES) -> Volume3D:
    """Map the 0.05/99.95 percentiles to 0/1 and clip.

    A volume whose percentile range collapses maps to all zeros.
    """
    p_lo = percentile_type7(vol.data, percentiles[0])
    p_hi = percentile_type7(vol.data, percentiles[1])
    if not p_hi > p_lo:
        return vol.with_data(np.zeros(vol.data.shape))
    v = np.asarray(vol.data, dtype=np.float64)
    return vol.with_data(np.clip((v - p_lo) / (p_hi - p_lo), 0.0, 1.0))


def normalize_adc(vol: Volume3D, factor: float = ADC_NORM_FACTOR) -> Volume3D:
    v = np.asarray(vol.data, dtype=np.float64)
    return vol.with_data(np.maximum(v, 0.0) / factor)


def normalize_dwi_b2000(
    vol: Volume3D,
    b0: Volume3D,
    prostate: Volume3D,
    range_constant: float = DEFAULT_RANGE_CONSTANT,
) -> Volume3D:
    """Divide by the in-gland b0 median, then by ``range_constant``; clip to [0, 1]."""
    check_same_geometry(vol, b0, prostate, what="b2000/b0/mask")
    if not range_constant > 0:
        raise InputError(f"range constant must be positive, got {range_constant}")
    factor = median_gland_factor(b0, prostate)
    if not factor > 0:
        raise InputError(f"median b0 intensity in the gland is {factor}, must be positive")
    v = np.asarray(vol.data, dtype=np.float64)
    return vol.with_data(np.clip(v / (factor * range_constant), 0.0, 1.0))


def median_gland_factor(b0: Volume3D, prostate: Volume3D) -> float:
    check_same_geometry(b0, prostate, what="b0/mask")
    inside = np.asarray(prostate.data) != 0
    if not inside.any():
        raise InputError("prostate mask is empty")
    return lower_median(np.asarray(b0.data)[inside])


def preprocess_case(
    t2w: Volume3D,
    dwi_b2000: Volume3D,
    adc: Volume3D,
    b0: Volume3D,
    mask: Volume3D,
    range_constant: float = DEFAULT_RANGE_CONSTANT,
    target_dims=DEFAULT_DIMS,
    target_spacing=DEFAULT_SPACING,
    extra_masks: dict | None = None,
) -> dict:
    """Resample a pre-aligned case onto the standard grid, then normalize.

    All inputs must share one grid (registration is assumed done). Returns
    a dict of volumes plus a ``"provenance"`` entry with the constants used.
    """
    if not mask.is_mask:
        raise InputError("prostate mask must be an integer volume")
    check_same_geometry(t2w, dwi_b2000, adc, b0, mask, what="case volumes")
    grid = dict(target_dims=target_dims, target_spacing=target_spacing)
    mask_r = resample(mask, mode="nearest", **grid)
    b0_r = resample(b0, **grid)
    factor = median_gland_factor(b0_r, mask_r)
    out = {
        "t2w": normalize_t2w(resample(t2w, **grid)),
        "adc": normalize_adc(resample(adc, **grid)),
        "dwi_b2000": normalize_dwi_b2000(resample(dwi_b2000, **grid), b0_r, mask_r, range_constant),
        "mask": mask_r,
    }
    for name, m in (extra_masks or {}).items():
        check_same_geometry(mask, m, what=f"mask/{name}")
        out[name] = resample(m, mode="nearest", **grid)
    out["provenance"] = {
        "range_constant": float(range_constant),
        "b0_gland_median": factor,
        "adc_factor": ADC_NORM_FACTOR,
        "t2w_percentiles": list(T2W_PERCENTILES),
        "target_dims": [int(d) for d in target_dims],
        "target_spacing": [float(s) for s in target_spacing],
    }
    return out
