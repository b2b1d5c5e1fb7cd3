"""Sliding-window geometry, training-patch sampling, overlap-averaged stitching
and whole-body assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .districts import DistrictBundle, PartitionError
from .volume import BinaryMask, ShapeError, Volume

PATCH_SIZE = 32
OVERLAP = 16
MIN_IN_DISTRICT_FRACTION = 0.05

Index3 = Tuple[int, int, int]


class PatchSizeError(ValueError):
    pass


class CoverageError(ValueError):
    def __init__(self, index: Index3):
        self.index = tuple(int(i) for i in index)
        super().__init__(f"voxel {self.index} is not covered by any patch")


class SamplingError(RuntimeError):
    pass


def axis_starts(n: int, s: int = PATCH_SIZE, o: int = OVERLAP) -> List[int]:
    """Window starts along one axis: multiples of ``s - o``, plus ``n - s`` if needed."""
    if not 0 < o < s:
        raise ValueError(f"need 0 < overlap < patch size, got s={s}, o={o}")
    if n < s:
        raise PatchSizeError(f"axis of length {n} is shorter than the patch size {s}; pad it first")
    starts = list(range(0, n - s + 1, s - o))
    if starts[-1] + s < n:
        starts.append(n - s)
    return starts


@dataclass(frozen=True)
class PatchGrid:
    dims: Index3
    patch_size: int
    overlap: int
    axis_starts: Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]

    @property
    def starts(self) -> List[Index3]:
        a, b, c = self.axis_starts
        return [(i, j, k) for i in a for j in b for k in c]

    def __len__(self) -> int:
        return int(np.prod([len(a) for a in self.axis_starts]))

    def slices(self, start: Index3) -> Tuple[slice, slice, slice]:
        s = self.patch_size
        return tuple(slice(x, x + s) for x in start)  # type: ignore[return-value]


def patch_grid(dims: Sequence[int], s: int = PATCH_SIZE, o: int = OVERLAP) -> PatchGrid:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"expected 3 dims, got {dims}")
    per_axis = tuple(tuple(axis_starts(n, s, o)) for n in dims)
    return PatchGrid(dims, s, o, per_axis)  # type: ignore[arg-type]


def cut_patches(array: np.ndarray, grid: PatchGrid) -> List[Tuple[np.ndarray, Index3]]:
    if tuple(array.shape) != grid.dims:
        raise ShapeError(f"array {array.shape} does not match grid {grid.dims}")
    return [(array[grid.slices(st)], st) for st in grid.starts]


class Stitcher:
    """Accumulates patches into a float64 sum and an integer coverage count."""

    def __init__(self, dims: Sequence[int]):
        self.dims = tuple(int(d) for d in dims)
        self.total = np.zeros(self.dims, dtype=np.float64)
        self.count = np.zeros(self.dims, dtype=np.int32)

    def add(self, values: np.ndarray, origin: Sequence[int]) -> None:
        values = np.asarray(values)
        sl = tuple(slice(int(o), int(o) + n) for o, n in zip(origin, values.shape))
        if values.ndim != 3 or any(int(o) < 0 or int(o) + n > d
                                   for o, n, d in zip(origin, values.shape, self.dims)):
            raise ShapeError(f"patch of shape {values.shape} at {tuple(origin)} does not fit {self.dims}")
        self.total[sl] += values
        self.count[sl] += 1

    def result(self) -> np.ndarray:
        uncovered = self.count == 0
        if uncovered.any():
            raise CoverageError(tuple(np.argwhere(uncovered)[0]))
        return (self.total / self.count).astype(np.float32)


def stitch(patches: Iterable[Tuple[np.ndarray, Sequence[int]]], dims: Sequence[int]) -> np.ndarray:
    """Average overlapping patches voxel-wise."""
    acc = Stitcher(dims)
    for values, origin in patches:
        acc.add(values, origin)
    return acc.result()


def _as_array(v: Union[Volume, np.ndarray]) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def assemble(district_volumes: Sequence[Tuple[Union[Volume, np.ndarray], BinaryMask]],
             dims: Sequence[int]) -> np.ndarray:
    """Place each district output inside its own mask; background stays 0."""
    dims = tuple(int(d) for d in dims)
    out = np.zeros(dims, dtype=np.float32)
    claimed = np.zeros(dims, dtype=np.int32)
    for vol, mask in district_volumes:
        data = _as_array(vol)
        ind = mask.indicator if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
        if data.shape != dims or ind.shape != dims:
            raise ShapeError(f"district grid {data.shape}/{ind.shape} does not match {dims}")
        claimed += ind
        out[ind] = data[ind]
    overlap = int(np.maximum(claimed - 1, 0).sum())
    if overlap:
        raise PartitionError(f"district masks overlap on {overlap} voxels")
    return out


@dataclass(frozen=True)
class PadRecord:
    pads: Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]

    @property
    def is_identity(self) -> bool:
        return all(a == 0 and b == 0 for a, b in self.pads)


def pad_to_min(array: np.ndarray, s: int = PATCH_SIZE) -> Tuple[np.ndarray, PadRecord]:
    """Zero-pad each axis shorter than ``s`` up to ``s``, splitting the padding evenly."""
    array = np.asarray(array)
    pads = []
    for n in array.shape:
        extra = max(0, s - n)
        pads.append((extra // 2, extra - extra // 2))
    record = PadRecord(tuple(pads))  # type: ignore[arg-type]
    if record.is_identity:
        return array, record
    return np.pad(array, pads, mode="constant"), record


def unpad(array: np.ndarray, record: PadRecord) -> np.ndarray:
    sl = tuple(slice(a, array.shape[i] - b) for i, (a, b) in enumerate(record.pads))
    return array[sl]


# --------------------------------------------------------------------------
# training patches

@dataclass(frozen=True, eq=False)
class PatchPair:
    ct: np.ndarray
    pet: Optional[np.ndarray]
    mask: np.ndarray
    origin: Index3
    district_id: int
    source: int = 0  # index of the bundle the patch was cut from


def _valid_origins(mask: np.ndarray, s: int, min_fraction: float) -> np.ndarray:
    """All window origins whose in-mask fraction reaches ``min_fraction``."""
    sat = np.zeros(tuple(n + 1 for n in mask.shape), dtype=np.int64)
    sat[1:, 1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    a, b, c = (np.arange(n - s + 1) for n in mask.shape)
    i, j, k = np.ix_(a, b, c)
    box = (sat[i + s, j + s, k + s] - sat[i, j + s, k + s] - sat[i + s, j, k + s] - sat[i + s, j + s, k]
           + sat[i, j, k + s] + sat[i, j + s, k] + sat[i + s, j, k] - sat[i, j, k])
    # integer comparison avoids float rounding at the threshold
    need = int(np.ceil(min_fraction * s ** 3 - 1e-9))
    return np.argwhere(box >= need).astype(np.int32)


class PatchSampler:
    """Draws training patches uniformly over the admissible window origins.

    The admissible set is enumerated once per bundle with a summed-area table,
    so each draw is exact and the only failure mode is an empty set.
    """

    def __init__(self, bundles: Sequence[DistrictBundle], patch_size: int = PATCH_SIZE,
                 min_fraction: float = MIN_IN_DISTRICT_FRACTION):
        if not 0.0 <= min_fraction <= 1.0:
            raise ValueError(f"min_fraction must lie in [0, 1], got {min_fraction}")
        if not bundles:
            raise SamplingError("no bundles to sample from")
        self.s = patch_size
        self.min_fraction = min_fraction
        self.bundles = list(bundles)
        self.origins = []
        for b in self.bundles:
            if min(b.ct.shape) < patch_size:
                raise PatchSizeError(f"bundle grid {b.ct.shape} is smaller than {patch_size}; pad it first")
            self.origins.append(_valid_origins(b.mask.indicator, patch_size, min_fraction))
        self.usable = [i for i, o in enumerate(self.origins) if len(o)]
        if not self.usable:
            raise SamplingError(
                f"no window reaches the in-district fraction {min_fraction} in any bundle")

    def draw(self, rng: np.random.Generator) -> PatchPair:
        src = self.usable[int(rng.integers(len(self.usable)))]
        cand = self.origins[src]
        origin = tuple(int(x) for x in cand[int(rng.integers(len(cand)))])
        b = self.bundles[src]
        sl = tuple(slice(x, x + self.s) for x in origin)
        pet = b.pet.data[sl] if b.pet is not None else None
        return PatchPair(b.ct.data[sl], pet, b.mask.indicator[sl], origin, b.district_id, src)

    def sample(self, count: int, rng: np.random.Generator) -> List[PatchPair]:
        return [self.draw(rng) for _ in range(count)]


def sample_training_patches(b: Union[DistrictBundle, Sequence[DistrictBundle]], count: int,
                            min_in_district_fraction: float = MIN_IN_DISTRICT_FRACTION,
                            seed: int = 0, patch_size: int = PATCH_SIZE) -> List[PatchPair]:
    bundles = [b] if isinstance(b, DistrictBundle) else list(b)
    sampler = PatchSampler(bundles, patch_size, min_in_district_fraction)
    return sampler.sample(count, np.random.default_rng(seed))
