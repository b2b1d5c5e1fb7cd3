"""Spatial alignment and intensity normalization of raw CT/PET pairs.

Physical coordinates are axis-aligned: ``world = origin + index * spacing``.
Samples falling outside the source voxel-center extent are 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume import Unit, Volume

SUV_CEILING = 20.0
# index coordinates this close to a voxel center snap onto it
_SNAP = 1e-6


class UnitError(ValueError):
    pass


class Grid(NamedTuple):
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]

    @classmethod
    def of(cls, v: Volume) -> "Grid":
        return cls(tuple(v.shape), v.spacing, v.origin)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"target dims must be >= 1 per axis, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"target spacing must be > 0, got {self.spacing}")


@dataclass(frozen=True)
class RigidTransform:
    """``y = rotation @ x + translation`` from source to reference physical space (mm)."""

    rotation: np.ndarray
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5) or abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3))

    @classmethod
    def from_matrix(cls, m: Sequence[Sequence[float]]) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3], tuple(m[:3, 3]))


@dataclass(frozen=True)
class SuvParams:
    body_weight: float  # kg
    injected_dose: float  # Bq, decay-corrected to scan start

    def __post_init__(self):
        if not self.body_weight > 0 or not self.injected_dose > 0:
            raise ValueError("body_weight and injected_dose must be strictly positive")


def _snap(idx: np.ndarray) -> np.ndarray:
    r = np.rint(idx)
    return np.where(np.abs(idx - r) < _SNAP, r, idx)


def _interp_axis(a: np.ndarray, axis: int, pos: np.ndarray) -> np.ndarray:
    n = a.shape[axis]
    pos = _snap(pos)
    valid = (pos >= 0) & (pos <= n - 1)
    p = np.clip(pos, 0, n - 1)
    i0 = np.floor(p).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = p - i0
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    out = (1.0 - w) * np.take(a, i0, axis=axis) + w * np.take(a, i1, axis=axis)
    return out * valid.reshape(shape)


def resample_trilinear(v: Volume, target_dims, target_spacing, target_origin) -> Volume:
    """Trilinear resampling onto an axis-aligned grid.

    Trilinear weights factor per axis on an axis-aligned grid, so the
    interpolation is applied one axis at a time.
    """
    grid = Grid(tuple(int(d) for d in target_dims), tuple(float(s) for s in target_spacing),
                tuple(float(o) for o in target_origin))
    grid.validate()
    out = v.data.astype(np.float64)
    for axis in range(3):
        world = grid.origin[axis] + np.arange(grid.dims[axis]) * grid.spacing[axis]
        pos = (world - v.origin[axis]) / v.spacing[axis]
        out = _interp_axis(out, axis, pos)
    return Volume(out.astype(np.float32), grid.spacing, grid.origin, v.modality, v.unit)


def apply_rigid(v: Volume, t: RigidTransform, reference_grid: Grid, chunk: int = 16) -> Volume:
    """Resample ``v`` onto ``reference_grid`` after moving it by ``t``."""
    if not isinstance(t, RigidTransform):
        t = RigidTransform(*t)
    grid = Grid(*reference_grid)
    grid.validate()
    inv = t.rotation.T
    tr = np.asarray(t.translation)
    sp_src = np.asarray(v.spacing)
    org_src = np.asarray(v.origin)
    src = v.data.astype(np.float64)
    out = np.empty(grid.dims, dtype=np.float32)
    ii, jj = np.meshgrid(np.arange(grid.dims[0]), np.arange(grid.dims[1]), indexing="ij")
    for z0 in range(0, grid.dims[2], chunk):
        zs = np.arange(z0, min(z0 + chunk, grid.dims[2]))
        idx = np.stack(np.broadcast_arrays(ii[..., None], jj[..., None], zs[None, None, :]))
        world = np.asarray(grid.origin)[:, None, None, None] + idx * np.asarray(grid.spacing)[:, None, None, None]
        src_world = np.tensordot(inv, world - tr[:, None, None, None], axes=1)
        coords = _snap((src_world - org_src[:, None, None, None]) / sp_src[:, None, None, None])
        out[:, :, zs] = ndimage.map_coordinates(src, coords, order=1, mode="constant", cval=0.0)
    return Volume(out, grid.spacing, grid.origin, v.modality, v.unit)


def suv_convert(v: Volume, p: SuvParams) -> Volume:
    """Body-weight SUV with 1 g/mL tissue density."""
    if v.unit is not Unit.BQ_PER_ML:
        raise UnitError(f"suv_convert expects BQ_PER_ML input, got {v.unit.value}")
    if not isinstance(p, SuvParams):
        p = SuvParams(*p)
    scale = p.body_weight * 1000.0 / p.injected_dose
    # reconstruction can leave slightly negative activity; SUV volumes are non-negative
    suv = np.maximum(v.data.astype(np.float64) * scale, 0.0)
    return v.with_data(suv.astype(np.float32), unit=Unit.SUV)


def clamp_normalize_pet(v: Volume) -> Volume:
    """Fixed SUV window [0, 20] mapped linearly onto [0, 1]."""
    if v.unit is not Unit.SUV:
        raise UnitError(f"clamp_normalize_pet expects SUV input, got {v.unit.value}")
    out = np.clip(v.data.astype(np.float64), 0.0, SUV_CEILING) / SUV_CEILING
    return v.with_data(out.astype(np.float32), unit=Unit.NORMALIZED)


def normalize_ct(v: Volume) -> Volume:
    """Per-volume min-max scaling; a constant volume maps to all zeros."""
    if v.unit is not Unit.HU:
        raise UnitError(f"normalize_ct expects HU input, got {v.unit.value}")
    data = v.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        out = (data - lo) / (hi - lo)
    else:
        out = np.zeros_like(data)
    return v.with_data(np.clip(out, 0.0, 1.0).astype(np.float32), unit=Unit.NORMALIZED)


def preprocess_pair(ct_hu: Volume, pet_bq: Volume, suv: SuvParams,
                    transform: Optional[RigidTransform] = None) -> Tuple[Volume, Volume]:
    """Bring a raw CT (HU) and PET (Bq/mL) onto the PET grid, both normalized to [0, 1]."""
    grid = Grid.of(pet_bq)
    # normalize before resampling so out-of-extent zeros land on air
    ct = normalize_ct(ct_hu)
    if transform is None:
        ct = resample_trilinear(ct, *grid)
    else:
        ct = apply_rigid(ct, transform, grid)
    pet = clamp_normalize_pet(suv_convert(pet_bq, suv))
    return ct, pet


def resample_nearest(array: np.ndarray, spacing, origin, reference_grid: Grid,
                     transform: Optional[RigidTransform] = None) -> np.ndarray:
    """Nearest-neighbour resampling of a label array onto ``reference_grid``."""
    grid = Grid(*reference_grid)
    grid.validate()
    t = transform or RigidTransform.identity()
    idx = np.indices(grid.dims, dtype=np.float64).reshape(3, -1)
    world = np.asarray(grid.origin)[:, None] + idx * np.asarray(grid.spacing)[:, None]
    src_world = t.rotation.T @ (world - np.asarray(t.translation)[:, None])
    coords = _snap((src_world - np.asarray(origin, dtype=np.float64)[:, None])
                   / np.asarray(spacing, dtype=np.float64)[:, None])
    out = ndimage.map_coordinates(np.asarray(array), coords, order=0, mode="constant", cval=0)
    return out.reshape(grid.dims).astype(np.asarray(array).dtype)
