"""The 3D scalar grid shared by every module.

Voxels are held as a numpy array indexed ``[z, y, x]`` in C order, so x is
the fastest-varying axis in memory. ``dims`` and ``spacing`` are reported in
``(x, y, z)`` order, matching the on-disk HVOL header.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dwih.errors import GeometryError, InputError


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Voxel array plus physical spacing in millimetres.

    Parameters
    ----------
    data : ndarray
        3D array indexed ``[z, y, x]``. Floating volumes keep whatever
        precision they were built with (fitting code works in float64);
        integer/bool arrays are treated as masks. The array is made
        read-only on construction.
    spacing : tuple of float
        ``(sx, sy, sz)`` voxel size in mm, all strictly positive.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 3:
            raise GeometryError(f"volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise GeometryError(f"every axis needs at least one voxel, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3:
            raise GeometryError(f"spacing must have 3 entries, got {spacing}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise InputError(f"spacing must be positive and finite, got {spacing}")
        if data is self.data:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def is_mask(self) -> bool:
        return self.data.dtype.kind in "biu"

    def with_data(self, data) -> "Volume3D":
        """New volume on the same grid."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError(f"shape {data.shape} does not match grid {self.data.shape}")
        return Volume3D(data, self.spacing)

    def same_geometry(self, other: "Volume3D") -> bool:
        return self.data.shape == other.data.shape and np.allclose(
            self.spacing, other.spacing, rtol=1e-6, atol=0.0
        )

    def voxel_centers_mm(self, indices) -> np.ndarray:
        """Physical ``(x, y, z)`` positions of ``[z, y, x]`` index rows.

        The origin sits on the centre of voxel ``(0, 0, 0)``.
        """
        idx = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
        return idx[:, ::-1] * np.asarray(self.spacing)

    def __repr__(self):
        return f"Volume3D(dims={self.dims}, spacing={self.spacing}, dtype={self.data.dtype})"


def check_same_geometry(*volumes: Volume3D, what: str = "volumes") -> None:
    first = volumes[0]
    for vol in volumes[1:]:
        if not first.same_geometry(vol):
            raise GeometryError(
                f"{what} disagree in geometry: {first.dims}@{first.spacing} vs {vol.dims}@{vol.spacing}"
            )
