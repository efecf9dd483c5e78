"""Dense 3-D scalar volumes and their raw on-disk format.

Volumes are stored headerless as little-endian IEEE-754 float32 in C
order (last index fastest). Grid dimensions and voxel spacing are not
part of the file; they live in the dataset manifest, so a reader must
know both to interpret the bytes.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .errors import DataFormatError

VOLUME_SUFFIX = ".f32raw"


@dataclasses.dataclass
class Volume:
    """A 3-D scalar field on a regular grid with per-axis voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        if any(n <= 0 for n in self.data.shape):
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"voxel spacing must be three positive reals, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def save_volume(volume: Volume, path: str | Path) -> None:
    """Write raw little-endian float32 bytes. Non-finite voxels are refused."""
    if not np.isfinite(volume.data).all():
        raise DataFormatError(f"{path}: refusing to save volume with NaN or Inf voxels")
    data = np.ascontiguousarray(volume.data, dtype="<f4")
    Path(path).write_bytes(data.tobytes())


def load_volume(
    path: str | Path,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Volume:
    """Read a raw volume back; the byte count must match dims exactly."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise ValueError(f"dims must be three positive ints, got {dims}")
    expected = 4 * dims[0] * dims[1] * dims[2]
    raw = Path(path).read_bytes()
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for dims {dims}, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if not np.isfinite(data).all():
        raise DataFormatError(f"{path}: volume contains NaN or Inf voxels")
    return Volume(data=data, spacing=spacing)
