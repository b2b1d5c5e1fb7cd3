"""Four-district partition of the body and per-district CT/PET extraction."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .volume import (
    DISTRICT_IDS,
    N_DISTRICTS,
    BinaryMask,
    DistrictLabelMask,
    PatientRecord,
    WHOLE_BODY,
    ShapeError,
    Volume,
    mask_apply,
)

# head > trunk > arms > legs when one voxel maps to several districts
DISTRICT_PRIORITY = (1, 2, 3, 4)


class LabelMappingError(ValueError):
    def __init__(self, missing: Sequence[int]):
        self.missing = sorted(int(m) for m in missing)
        super().__init__(f"labels not covered by the collapse map: {self.missing}")


class PartitionError(ValueError):
    pass


class LabelCollapseMap(dict):
    """Source segmentation label -> district id (0 = background)."""

    def __init__(self, table: Optional[Mapping[int, int]] = None):
        super().__init__()
        for k, v in (table or {}).items():
            self[int(k)] = int(v)

    def __setitem__(self, key, value):
        value = int(value)
        if not 0 <= value <= N_DISTRICTS:
            raise ValueError(f"label {key} maps to {value}, outside 0..{N_DISTRICTS}")
        super().__setitem__(int(key), value)

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "LabelCollapseMap":
        """Parse ``source_label = district`` lines; district may be an id or a name."""
        table = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{lineno}: expected 'source_label = district_id'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                label = int(key)
                district = DISTRICT_IDS.get(value.lower(), None)
                if district is None:
                    district = 0 if value.lower() == "background" else int(value)
                table[label] = district
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
        return table

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "LabelCollapseMap":
        with open(path) as fh:
            return cls.parse(fh.read(), str(path))

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.items()))


@dataclass(frozen=True, eq=False)
class DistrictBundle:
    district_id: int
    ct: Volume
    mask: BinaryMask
    pet: Optional[Volume] = None


@dataclass(frozen=True)
class PartitionReport:
    ok: bool
    overlap_voxels: int
    coverage_deficit: int
    excess_voxels: int

    def __bool__(self) -> bool:
        return self.ok


def collapse_labels(raw: np.ndarray, table: Mapping[int, int],
                    spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> DistrictLabelMask:
    raw = np.asarray(raw)
    present = np.unique(raw)
    missing = [int(v) for v in present if int(v) not in table]
    if missing:
        raise LabelMappingError(missing)
    lut_keys = np.array(sorted(table), dtype=np.int64)
    lut_vals = np.array([table[k] for k in lut_keys], dtype=np.uint8)
    labels = lut_vals[np.searchsorted(lut_keys, raw.astype(np.int64))]
    return DistrictLabelMask(labels, spacing, origin)


def collapse_overlapping(raws: Sequence[np.ndarray], table: Mapping[int, int],
                         spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> DistrictLabelMask:
    """Merge several label volumes whose structures may overlap.

    A voxel claimed by more than one district goes to the one listed first in
    ``DISTRICT_PRIORITY``.
    """
    collapsed = [collapse_labels(r, table).labels for r in raws]
    out = np.zeros(collapsed[0].shape, dtype=np.uint8)
    for district in reversed(DISTRICT_PRIORITY):
        for c in collapsed:
            out[c == district] = district
    return DistrictLabelMask(out, spacing, origin)


def binary_masks(m: DistrictLabelMask) -> List[BinaryMask]:
    return [BinaryMask(m.labels == i, i) for i in range(1, N_DISTRICTS + 1)]


def partition_check(masks: Sequence[BinaryMask], m: DistrictLabelMask) -> PartitionReport:
    """Pairwise disjointness and exact coverage of the non-background voxels."""
    counts = np.zeros(m.shape, dtype=np.int32)
    for mk in masks:
        if mk.shape != m.shape:
            raise ShapeError(f"grid mismatch: {mk.shape} vs {m.shape}")
        counts += mk.indicator
    body = m.labels != 0
    overlap = int(np.maximum(counts - 1, 0).sum())
    deficit = int((body & (counts == 0)).sum())
    excess = int((~body & (counts > 0)).sum())
    return PartitionReport(overlap == 0 and deficit == 0 and excess == 0, overlap, deficit, excess)


def extract_bundles(p: PatientRecord) -> List[DistrictBundle]:
    """One bundle per district; voxels outside the district are exactly 0."""
    bundles = []
    for mk in binary_masks(p.district_mask):
        ct = mask_apply(p.ct, mk)
        pet = mask_apply(p.pet, mk) if p.pet is not None else None
        bundles.append(DistrictBundle(mk.district_id, ct, mk, pet))
    return bundles


def whole_body_bundle(p: PatientRecord) -> DistrictBundle:
    """Unsegmented CT/PET for the whole-body model; the body mask only guides sampling."""
    return DistrictBundle(WHOLE_BODY, p.ct, p.district_mask.body(), p.pet)


def district_voxel_counts(m: DistrictLabelMask) -> Dict[int, int]:
    counts = np.bincount(m.labels.ravel(), minlength=N_DISTRICTS + 1)
    return {i: int(counts[i]) for i in range(N_DISTRICTS + 1)}
