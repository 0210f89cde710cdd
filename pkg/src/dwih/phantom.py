"""Synthetic prostate-like phantoms with known ADC/S0 ground truth.

Regions (background, ellipsoidal gland, spherical lesions) are assigned at
voxel centres; each region carries a constant (S0, ADC) pair and the DWI
signal is the exact mono-exponential. Physical coordinates put the centre
of voxel (0, 0, 0) at the origin, matching candidate centroids.

Noise, when requested, is Gaussian with standard deviation
``sigma * noiseless signal`` at every voxel and b-value, clamped at 0.
Random draws use Philox streams keyed by (seed, purpose, index), so output
depends only on the seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from dwih.errors import InputError, SpecError
from dwih.evaluation import LesionAnnotation
from dwih.signal_model import ADC_MAX, ADC_SCALE, AdcFitResult, DwiObservation, DwiSeries, MetaInfo
from dwih.volume import Volume3D

# one (low, high) b-value pair per acquisition group
GROUP_PAIRS = (
    (0.0, 800.0),
    (0.0, 1500.0),
    (50.0, 600.0),
    (50.0, 800.0),
    (100.0, 1400.0),
    (50.0, 2000.0),
    (150.0, 1000.0),
    (150.0, 1500.0),
    (200.0, 2000.0),
)

_STREAM_NOISE = 1
_STREAM_T2W = 2
_STREAM_HEATMAP = 3


@dataclass
class Lesion:
    center_mm: tuple[float, float, float]
    radius_mm: float
    adc: float = 700.0
    s0: float = 900.0
    pirads: int = 4


@dataclass
class PhantomSpec:
    """Phantom geometry and tissue parameters.

    ``gland_center_mm`` defaults to the grid centre. ADC values are in
    1e-6 mm^2/s; lesions may be given as :class:`Lesion` or plain dicts.
    """

    dims: tuple[int, int, int] = (64, 64, 12)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    gland_center_mm: tuple[float, float, float] | None = None
    gland_radii_mm: tuple[float, float, float] = (20.0, 16.0, 12.0)
    adc_gland: float = 1400.0
    s0_gland: float = 1000.0
    adc_bg: float = 300.0
    s0_bg: float = 400.0
    lesions: list = field(default_factory=list)
    noise: str = "none"
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.lesions = [les if isinstance(les, Lesion) else Lesion(**les) for les in self.lesions]
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise SpecError(f"spacing must be positive, got {self.spacing}")
        if self.gland_center_mm is None:
            self.gland_center_mm = self.grid_center_mm
        self.gland_center_mm = tuple(float(c) for c in self.gland_center_mm)
        self.gland_radii_mm = tuple(float(r) for r in self.gland_radii_mm)
        if min(self.gland_radii_mm) <= 0:
            raise SpecError("gland radii must be positive")
        adcs = [self.adc_gland, self.adc_bg] + [les.adc for les in self.lesions]
        if not all(0.0 <= a <= ADC_MAX for a in adcs):
            raise SpecError(f"ADC values must lie in [0, {ADC_MAX}]")
        if self.noise not in ("none", "gaussian"):
            raise SpecError(f"noise must be 'none' or 'gaussian', got {self.noise!r}")
        if self.noise_sigma < 0:
            raise SpecError("noise sigma must be non-negative")
        for les in self.lesions:
            if not les.radius_mm > 0:
                raise SpecError(f"lesion radius must be positive, got {les.radius_mm}")
            if les.pirads not in (3, 4, 5):
                raise SpecError(f"lesion PI-RADS must be 3, 4 or 5, got {les.pirads}")

    @property
    def grid_center_mm(self) -> tuple[float, float, float]:
        return tuple((n - 1) / 2.0 * s for n, s in zip(self.dims, self.spacing))

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls(**json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass(frozen=True, eq=False)
class Phantom:
    series: DwiSeries
    annotation: LesionAnnotation
    gland: Volume3D
    truth: AdcFitResult
    t2w: Volume3D


def _coords(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    z, y, x = np.meshgrid(np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx, indexing="ij")
    return x, y, z


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), (stream << 32) | index]))


def tissue_maps(spec: PhantomSpec):
    """Ground-truth (s0, adc, gland mask, lesion label mask) arrays."""
    x, y, z = _coords(spec)
    cx, cy, cz = spec.gland_center_mm
    rx, ry, rz = spec.gland_radii_mm
    gland = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
    s0 = np.where(gland, spec.s0_gland, spec.s0_bg).astype(np.float64)
    adc = np.where(gland, spec.adc_gland, spec.adc_bg).astype(np.float64)
    labels = np.zeros(gland.shape, dtype=np.uint8)
    for k, les in enumerate(spec.lesions, start=1):
        lx, ly, lz = les.center_mm
        inside = (x - lx) ** 2 + (y - ly) ** 2 + (z - lz) ** 2 <= les.radius_mm**2
        if not inside.any():
            raise SpecError(f"lesion {k} covers no voxel centre")
        if not gland[inside].all():
            raise SpecError(f"lesion {k} extends outside the gland")
        s0[inside] = les.s0
        adc[inside] = les.adc
        labels[inside] = k
    return s0, adc, gland, labels


def generate_phantom(spec: PhantomSpec, b_values, meta: MetaInfo | None = None) -> Phantom:
    b_values = [float(b) for b in b_values]
    if len(b_values) < 2:
        raise InputError("a phantom series needs at least two b-values")
    s0, adc, gland, labels = tissue_maps(spec)
    obs = []
    for i, b in enumerate(sorted(b_values)):
        sig = s0 * np.exp(-b * adc / ADC_SCALE)
        if spec.noise == "gaussian" and spec.noise_sigma > 0:
            noise = _rng(spec.seed, _STREAM_NOISE, i).standard_normal(sig.shape)
            sig = np.maximum(sig + spec.noise_sigma * sig * noise, 0.0)
        obs.append(DwiObservation(b, Volume3D(sig, spec.spacing)))

    t2w = np.where(gland, 300.0, 100.0)
    t2w[labels > 0] = 150.0
    t2w = t2w + 5.0 * _rng(spec.seed, _STREAM_T2W).standard_normal(t2w.shape)

    pirads = {k: les.pirads for k, les in enumerate(spec.lesions, start=1)}
    mk = lambda a: Volume3D(a, spec.spacing)  # noqa: E731
    return Phantom(
        series=DwiSeries(tuple(obs), meta),
        annotation=LesionAnnotation(mk(labels), pirads),
        gland=mk(gland.astype(np.uint8)),
        truth=AdcFitResult(mk(adc), mk(s0), mk(np.zeros_like(adc)), tuple(sorted(b_values)), "truth"),
        t2w=mk(t2w),
    )


def oracle_heatmap(
    annot: LesionAnnotation,
    quality: float,
    fp_rate: float = 0.0,
    seed: int = 0,
    blob_size: tuple[int, int, int] = (1, 3, 3),
    max_attempts: int = 1000,
) -> Volume3D:
    """Stand-in detector output with a known answer.

    Lesion voxels score ``quality``. A Poisson(``fp_rate``) number of
    spurious boxes (``blob_size`` in z, y, x) is scattered away from the
    lesions and from each other, each with a uniform score in [0.05, 0.95].
    The Poisson count is the first draw of the seeded stream.
    """
    quality = float(quality)
    if not 0.0 <= quality <= 1.0:
        raise InputError(f"quality must lie in [0, 1], got {quality}")
    if fp_rate < 0:
        raise InputError("fp_rate must be non-negative")
    mask = np.asarray(annot.mask.data) != 0
    heat = np.where(mask, quality, 0.0)
    rng = _rng(seed, _STREAM_HEATMAP)
    n_blobs = int(rng.poisson(fp_rate))
    # keep blobs out of the 26-neighbourhood of anything already placed
    occupied = ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), bool))
    bz, by, bx = (min(b, n) for b, n in zip(blob_size, mask.shape))
    placed = 0
    for _ in range(max_attempts):
        if placed == n_blobs:
            break
        z = int(rng.integers(0, mask.shape[0] - bz + 1))
        y = int(rng.integers(0, mask.shape[1] - by + 1))
        x = int(rng.integers(0, mask.shape[2] - bx + 1))
        score = float(rng.uniform(0.05, 0.95))
        box = (slice(z, z + bz), slice(y, y + by), slice(x, x + bx))
        if occupied[box].any():
            continue
        heat[box] = score
        grown = (slice(max(z - 1, 0), z + bz + 1), slice(max(y - 1, 0), y + by + 1), slice(max(x - 1, 0), x + bx + 1))
        occupied[grown] = True
        placed += 1
    return annot.mask.with_data(heat)


def random_cohort_spec(rng: np.random.Generator, base: PhantomSpec | None = None, p_lesion: float = 0.5) -> PhantomSpec:
    """A phantom spec with 0-2 random, well separated lesions inside the gland.

    Lesions are redrawn until their surfaces are at least two coarsest
    voxel spacings apart, so they never merge into one detection.
    """
    base = base or PhantomSpec()
    spec = PhantomSpec(**{**asdict(base), "lesions": []})
    cx, cy, cz = spec.gland_center_mm
    rx, ry, rz = spec.gland_radii_mm
    gap = 2.0 * max(spec.spacing)
    lesions = []
    if rng.random() < p_lesion:
        for _ in range(int(rng.integers(1, 3))):
            for _attempt in range(100):
                r = float(rng.uniform(2.5, 4.0))
                # stay within half the gland radii so the sphere fits
                off = rng.uniform(-0.45, 0.45, 3) * np.array([rx, ry, max(rz - r, 0.0)])
                centre = (cx + off[0], cy + off[1], cz + off[2])
                if all(np.linalg.norm(np.subtract(centre, o.center_mm)) >= r + o.radius_mm + gap for o in lesions):
                    break
            else:
                break
            lesions.append(
                Lesion(
                    center_mm=tuple(float(c) for c in centre),
                    radius_mm=r,
                    adc=float(rng.uniform(500, 900)),
                    s0=float(rng.uniform(800, 1100)),
                    pirads=int(rng.integers(3, 6)),
                )
            )
    spec.lesions = lesions
    return spec
