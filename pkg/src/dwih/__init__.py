"""Diffusion-weighted MRI harmonization toolkit.

Mono-exponential ADC fitting and high-b extrapolation, volume
preprocessing, b-value conditioned dynamic convolution, generator loss
dispatch, and the lesion-detection evaluation protocol (matching, FROC,
bootstrapped AUC, image quality), plus a synthetic phantom generator used
to verify all of it against known ground truth.
"""

from dwih.errors import (
    ArityError,
    CheckFailure,
    DegenerateDataError,
    DwihError,
    FormatError,
    GeometryError,
    InputError,
    ShapeError,
    SpecError,
)
from dwih.volume import Volume3D

__version__ = "0.1.0"

__all__ = [
    "ArityError",
    "CheckFailure",
    "DegenerateDataError",
    "DwihError",
    "FormatError",
    "GeometryError",
    "InputError",
    "ShapeError",
    "SpecError",
    "Volume3D",
]
