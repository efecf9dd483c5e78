"""Stochastic 3-D augmentation: flips, affine warps, elastic deformation.

Two presets mirror the consistency-training contract. The weak policy
applies axis flips plus a mild affine jitter; the strong policy applies
a larger affine plus an elastic warp driven by a coarse control grid.
Rotation, scale, and translation compose into one matrix and, together
with the elastic displacement, resolve through a single trilinear
resampling pass (zero fill outside the grid).

All randomness comes from the seed argument: identical (volume, policy,
seed) triples produce identical outputs. Elastic displacements are
forced to zero at the border control nodes, so a purely elastic warp
never samples outside the volume.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import ndimage

from .volume import Volume


@dataclasses.dataclass(frozen=True)
class AffineRanges:
    max_rotation_deg: float = 0.0
    max_scale_delta: float = 0.0
    max_translation_vox: float = 0.0

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 0:
                raise ValueError(f"{field.name} must be >= 0")

    def is_identity(self) -> bool:
        return (
            self.max_rotation_deg == 0
            and self.max_scale_delta == 0
            and self.max_translation_vox == 0
        )


@dataclasses.dataclass(frozen=True)
class ElasticRanges:
    control_grid: int = 4
    max_displacement_vox: float = 3.0

    def __post_init__(self) -> None:
        if self.control_grid < 2:
            raise ValueError("elastic control grid needs at least 2 nodes per axis")
        if self.max_displacement_vox < 0:
            raise ValueError("max_displacement_vox must be >= 0")


@dataclasses.dataclass(frozen=True)
class AugmentPolicy:
    kind: str
    flip_prob: float = 0.0
    affine: AffineRanges = AffineRanges()
    elastic: ElasticRanges | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"policy kind must be 'weak' or 'strong', got {self.kind!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.kind == "weak" and self.elastic is not None:
            raise ValueError("weak policy must not deform elastically")


def default_weak_policy() -> AugmentPolicy:
    return AugmentPolicy(
        kind="weak",
        flip_prob=0.5,
        affine=AffineRanges(
            max_rotation_deg=5.0, max_scale_delta=0.05, max_translation_vox=1.0
        ),
    )


def default_strong_policy() -> AugmentPolicy:
    return AugmentPolicy(
        kind="strong",
        flip_prob=0.0,
        affine=AffineRanges(
            max_rotation_deg=20.0, max_scale_delta=0.15, max_translation_vox=4.0
        ),
        elastic=ElasticRanges(control_grid=4, max_displacement_vox=3.0),
    )


def _rotation_matrix(angles_rad: np.ndarray) -> np.ndarray:
    """Compose rotations about the three grid axes, applied axis 0 -> 1 -> 2."""
    mats = []
    for axis, angle in enumerate(angles_rad):
        c, s = math.cos(angle), math.sin(angle)
        m = np.eye(3)
        a, b = [i for i in range(3) if i != axis]
        m[a, a], m[a, b], m[b, a], m[b, b] = c, -s, s, c
        mats.append(m)
    return mats[2] @ mats[1] @ mats[0]


def _elastic_displacement(
    ranges: ElasticRanges, dims: tuple[int, ...], rng: np.random.Generator
) -> np.ndarray:
    """Per-axis displacement field in voxels, zero on the volume border."""
    g = ranges.control_grid
    nodes = rng.uniform(-ranges.max_displacement_vox, ranges.max_displacement_vox, (3, g, g, g))
    nodes[:, 0, :, :] = nodes[:, -1, :, :] = 0.0
    nodes[:, :, 0, :] = nodes[:, :, -1, :] = 0.0
    nodes[:, :, :, 0] = nodes[:, :, :, -1] = 0.0
    node_coords = np.meshgrid(
        *[np.linspace(0.0, g - 1.0, n) for n in dims],
        indexing="ij",
    )
    stacked = np.stack(node_coords)
    return np.stack(
        [ndimage.map_coordinates(nodes[axis], stacked, order=1, mode="nearest") for axis in range(3)]
    )


def apply_policy(volume: Volume, policy: AugmentPolicy, seed: int) -> Volume:
    rng = np.random.default_rng(seed)
    dims = volume.dims

    # Draw in a fixed order so the stream layout never depends on the values.
    flips = rng.random(3) < policy.flip_prob
    aff = policy.affine
    angles = np.deg2rad(rng.uniform(-aff.max_rotation_deg, aff.max_rotation_deg, 3))
    scale = 1.0 + rng.uniform(-aff.max_scale_delta, aff.max_scale_delta)
    translation = rng.uniform(-aff.max_translation_vox, aff.max_translation_vox, 3)

    data = volume.data
    for axis in range(3):
        if flips[axis]:
            data = np.flip(data, axis=axis)
    data = np.ascontiguousarray(data)

    elastic_on = policy.elastic is not None and policy.elastic.max_displacement_vox > 0
    if aff.is_identity() and not elastic_on:
        return Volume(data=data.copy(), spacing=volume.spacing)

    # Backward warp: for each output voxel o, sample the input at
    # R_inv S_inv (o - c - t) + c + D(o).
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    forward = _rotation_matrix(angles) * scale
    inverse = np.linalg.inv(forward)
    out_coords = np.indices(dims, dtype=np.float64)
    shifted = out_coords - (center + translation).reshape(3, 1, 1, 1)
    sample_at = np.einsum("ij,j...->i...", inverse, shifted) + center.reshape(3, 1, 1, 1)
    if elastic_on:
        sample_at = sample_at + _elastic_displacement(policy.elastic, dims, rng)

    warped = ndimage.map_coordinates(data, sample_at, order=1, mode="constant", cval=0.0)
    return Volume(data=warped.astype(np.float32), spacing=volume.spacing)


def weak_augment(volume: Volume, seed: int, policy: AugmentPolicy | None = None) -> Volume:
    return apply_policy(volume, policy or default_weak_policy(), seed)


def strong_augment(volume: Volume, seed: int, policy: AugmentPolicy | None = None) -> Volume:
    return apply_policy(volume, policy or default_strong_policy(), seed)
