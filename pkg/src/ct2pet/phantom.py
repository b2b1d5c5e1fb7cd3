"""Synthetic paired CT/PET phantoms with district-dependent CT->PET transfer functions.

The body is a head sphere, a trunk ellipsoid, two arm cylinders and two leg
cylinders along z (head at high z). CT intensity ranges of the districts
overlap, so only the district identity tells which transfer function applies.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .manifest import write_manifest
from .volume import (
    N_DISTRICTS,
    BinaryMask,
    Condition,
    DistrictLabelMask,
    Modality,
    PatientRecord,
    Split,
    Unit,
    Volume,
)

MALIGNANT = (Condition.LYMPHOMA, Condition.NSCLC, Condition.MELANOMA)

# quadratic coefficients (c0, c1, c2): T(x) = clip(c0 + c1 x + c2 x^2, 0, 1)
DEFAULT_TRANSFER = (
    (0.1, 0.8, 0.0),   # head
    (0.0, 0.0, 1.0),   # trunk
    (0.0, 0.5, 0.0),   # arms
    (0.15, 0.3, 0.0),  # legs
)
LINEAR_TRANSFER = ((0.0, 0.5, 0.0),) * N_DISTRICTS


class PhantomConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (64, 64, 160)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    transfer: Tuple[Tuple[float, float, float], ...] = DEFAULT_TRANSFER
    ct_base_range: Tuple[float, float] = (0.42, 0.58)
    texture_amplitude: float = 0.08
    texture_sigma: float = 3.0
    sigma_ct: float = 0.01
    sigma_pet: float = 0.01
    lesion_count_range: Tuple[int, int] = (0, 4)
    lesion_radius_range: Tuple[int, int] = (5, 8)
    lesion_boost: float = 0.3
    lesion_ct_contrast: float = 0.3
    jitter: float = 0.05  # relative size jitter per patient
    seed: int = 0
    n_patients: int = 20
    split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise PhantomConfigError("dims", f"need three axes of at least 32 voxels, got {self.dims}")
        if len(self.transfer) != N_DISTRICTS or any(len(t) != 3 for t in self.transfer):
            raise PhantomConfigError("transfer", "need one (c0, c1, c2) triple per district")
        for name in ("texture_amplitude", "texture_sigma", "sigma_ct", "sigma_pet", "lesion_boost",
                     "jitter"):
            if getattr(self, name) < 0:
                raise PhantomConfigError(name, "must be >= 0")
        lo, hi = self.ct_base_range
        if not 0 <= lo <= hi <= 1:
            raise PhantomConfigError("ct_base_range", f"need 0 <= lo <= hi <= 1, got {self.ct_base_range}")
        lo, hi = self.lesion_count_range
        if not 0 <= lo <= hi:
            raise PhantomConfigError("lesion_count_range", f"invalid range {self.lesion_count_range}")
        lo, hi = self.lesion_radius_range
        if not 1 <= lo <= hi:
            raise PhantomConfigError("lesion_radius_range", f"invalid range {self.lesion_radius_range}")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise PhantomConfigError("split_fractions", f"need three non-negative values summing to 1, got {fr}")
        if self.n_patients < 1:
            raise PhantomConfigError("n_patients", "must be positive")


def transfer(x: np.ndarray, coeffs: Sequence[float]) -> np.ndarray:
    c0, c1, c2 = coeffs
    return np.clip(c0 + c1 * x + c2 * x * x, 0.0, 1.0)


def analytic_pet(ct: np.ndarray, labels: np.ndarray, c: PhantomConfig) -> np.ndarray:
    """Noise- and lesion-free PET implied by the district transfer functions."""
    out = np.zeros(ct.shape, dtype=np.float64)
    for d in range(1, N_DISTRICTS + 1):
        m = labels == d
        out[m] = transfer(ct[m].astype(np.float64), c.transfer[d - 1])
    return out.astype(np.float32)


# --------------------------------------------------------------------------
# geometry

def _body_labels(dims: Tuple[int, int, int], rng: np.random.Generator, jitter: float) -> np.ndarray:
    X, Y, Z = dims
    x, y, z = np.meshgrid(np.arange(X) + 0.5, np.arange(Y) + 0.5, np.arange(Z) + 0.5, indexing="ij")
    s = 1.0 + rng.uniform(-jitter, jitter, size=6)
    cx = X / 2 + rng.uniform(-1.5, 1.5)
    cy = Y / 2 + rng.uniform(-1.5, 1.5)
    zs = 1.0 + rng.uniform(-jitter, jitter) * 0.5

    shapes: Dict[int, np.ndarray] = {}
    extents: List[Tuple[str, Tuple[float, ...]]] = []

    r_head = 0.17 * X * s[0]
    zh = 0.885 * Z * zs
    shapes[1] = (x - cx) ** 2 + (y - cy) ** 2 + (z - zh) ** 2 <= r_head ** 2
    extents.append(("head", (cx - r_head, cx + r_head, cy - r_head, cy + r_head, zh - r_head, zh + r_head)))

    ax, ay, az = 0.22 * X * s[1], 0.16 * Y * s[2], 0.19 * Z * s[3]
    zt = 0.6 * Z * zs
    shapes[2] = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - zt) / az) ** 2 <= 1.0
    extents.append(("trunk", (cx - ax, cx + ax, cy - ay, cy + ay, zt - az, zt + az)))

    r_arm = 0.08 * X * s[4]
    z0, z1 = zt - 0.75 * az, zt + 0.85 * az
    arms = np.zeros(dims, dtype=bool)
    for side in (-1, 1):
        xa = cx + side * (ax + r_arm + 1.0)
        arms |= ((x - xa) ** 2 + (y - cy) ** 2 <= r_arm ** 2) & (z >= z0) & (z <= z1)
        extents.append(("arms", (xa - r_arm, xa + r_arm, cy - r_arm, cy + r_arm, z0, z1)))
    shapes[3] = arms

    r_leg = 0.1 * X * s[5]
    z0, z1 = 0.03 * Z, zt - 0.6 * az
    legs = np.zeros(dims, dtype=bool)
    for side in (-1, 1):
        xl = cx + side * (r_leg + 1.0)
        legs |= ((x - xl) ** 2 + (y - cy) ** 2 <= r_leg ** 2) & (z >= z0) & (z <= z1)
        extents.append(("legs", (xl - r_leg, xl + r_leg, cy - r_leg, cy + r_leg, z0, z1)))
    shapes[4] = legs

    for name, (x0, x1, y0, y1, z0, z1) in extents:
        if x0 < 0 or y0 < 0 or z0 < 0 or x1 > X or y1 > Y or z1 > Z:
            raise PhantomConfigError("dims", f"{name} does not fit in {dims}")

    labels = np.zeros(dims, dtype=np.uint8)
    for d in (4, 3, 2, 1):  # later writes win: head > trunk > arms > legs
        labels[shapes[d]] = d
    for d in range(1, N_DISTRICTS + 1):
        if not (labels == d).any():
            raise PhantomConfigError("dims", f"district {d} is empty at {dims}")
    return labels


def _lesions(trunk: np.ndarray, count: int, radius_range: Tuple[int, int],
             rng: np.random.Generator) -> np.ndarray:
    depth = ndimage.distance_transform_edt(trunk)
    grid = np.indices(trunk.shape, dtype=np.float64)
    out = np.zeros(trunk.shape, dtype=bool)
    for _ in range(count):
        r = int(rng.integers(radius_range[0], radius_range[1] + 1))
        cand = np.argwhere(depth >= r + 1)
        if not len(cand):
            cand = np.argwhere(depth == depth.max())
        c = cand[int(rng.integers(len(cand)))]
        d2 = sum((grid[i] - c[i]) ** 2 for i in range(3))
        out |= (d2 <= r * r) & trunk
    return out


def generate_phantom(c: PhantomConfig, patient_index: int) -> PatientRecord:
    """Deterministic in (c.seed, patient_index)."""
    rng = np.random.default_rng([c.seed, patient_index])
    dims = tuple(int(d) for d in c.dims)
    labels = _body_labels(dims, rng, c.jitter)
    body = labels != 0

    ct = np.zeros(dims, dtype=np.float64)
    bases = rng.uniform(*c.ct_base_range, size=N_DISTRICTS)
    for d in range(1, N_DISTRICTS + 1):
        ct[labels == d] = bases[d - 1]
    if c.texture_amplitude > 0:
        tex = ndimage.gaussian_filter(rng.standard_normal(dims), c.texture_sigma)
        tex /= tex.std() + 1e-12
        ct += c.texture_amplitude * tex
    ct += c.sigma_ct * rng.standard_normal(dims)

    lo, hi = c.lesion_count_range
    n_lesions = int(rng.integers(lo, hi + 1))
    lesion = _lesions(labels == 2, n_lesions, c.lesion_radius_range, rng) if n_lesions else None
    if lesion is not None:
        ct[lesion] += c.lesion_ct_contrast
    # stored CT is float32, so the PET must be derived from the rounded values
    ct = np.where(body, np.clip(ct, 0.0, 1.0), 0.0).astype(np.float32)

    pet = analytic_pet(ct, labels, c).astype(np.float64)
    if lesion is not None:
        pet[lesion] += c.lesion_boost
    pet += c.sigma_pet * rng.standard_normal(dims)
    pet = np.where(body, np.clip(pet, 0.0, 1.0), 0.0)

    weight = float(rng.uniform(55.0, 95.0))
    condition = Condition.NEGATIVE_CONTROL if n_lesions == 0 else MALIGNANT[patient_index % 3]
    spacing = tuple(float(s) for s in c.spacing)
    return PatientRecord(
        patient_id=f"patient_{patient_index:03d}",
        ct=Volume(ct, spacing, (0.0, 0.0, 0.0), Modality.CT, Unit.NORMALIZED),
        district_mask=DistrictLabelMask(labels, spacing),
        pet=Volume(pet.astype(np.float32), spacing, (0.0, 0.0, 0.0), Modality.PET, Unit.NORMALIZED),
        lesion_mask=BinaryMask(lesion) if lesion is not None else None,
        condition=condition,
        body_weight=weight,
        injected_dose=3.7e6 * weight,
        extra={"n_lesions": n_lesions, "seed": int(c.seed), "index": int(patient_index)},
    )


# --------------------------------------------------------------------------
# cohorts

def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    """Floor for val and test, remainder to train."""
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = int(math.floor(n * fractions[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def assign_splits(conditions: Sequence[Condition], fractions: Sequence[float]) -> List[Split]:
    """Stratified deterministic split assignment.

    Patients are visited grouped by condition; each goes to the split whose
    running quota is furthest behind, so every condition is spread over the
    splits in proportion to the fractions.
    """
    n = len(conditions)
    targets = split_sizes(n, fractions)
    order = sorted(range(n), key=lambda i: (list(Condition).index(Condition(conditions[i])), i))
    counts = [0, 0, 0]
    out: List[Optional[Split]] = [None] * n
    splits = (Split.TRAIN, Split.VAL, Split.TEST)
    for k, i in enumerate(order):
        lag = [targets[s] * (k + 1) / n - counts[s] if counts[s] < targets[s] else -math.inf
               for s in range(3)]
        s = int(np.argmax(lag))
        counts[s] += 1
        out[i] = splits[s]
    return out  # type: ignore[return-value]


def phantom_dataset(c: PhantomConfig, n_patients: Optional[int] = None,
                    split_fractions: Optional[Sequence[float]] = None,
                    out_dir: Union[str, os.PathLike, None] = None) -> List[PatientRecord]:
    """Generate a cohort, assign stratified splits and optionally write it with a manifest."""
    n = c.n_patients if n_patients is None else int(n_patients)
    fractions = tuple(c.split_fractions if split_fractions is None else split_fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise PhantomConfigError("split_fractions", f"need three non-negative values summing to 1, got {fractions}")
    if n < 5:
        raise PhantomConfigError("n_patients", f"need at least 5 patients so every split is nonempty, got {n}")
    if 0 in split_sizes(n, fractions):
        raise PhantomConfigError("n_patients", f"{n} patients leave a split empty with fractions {fractions}")
    records = [generate_phantom(c, i) for i in range(n)]
    for p, s in zip(records, assign_splits([p.condition for p in records], fractions)):
        p.split = s
    if out_dir is not None:
        write_manifest(records, Path(out_dir))
    return records


def heterogeneity_floor(records: Sequence[PatientRecord], bins: int = 256) -> float:
    """Lower bound on the in-body MAE of any single CT->PET map.

    Pools in-body (CT, PET) pairs, bins CT finely and predicts each bin by its
    PET median, which is the least-absolute-error constant per bin.
    """
    xs, ys = [], []
    for p in records:
        body = p.district_mask.labels != 0
        xs.append(p.ct.data[body].astype(np.float64))
        ys.append(p.pet.data[body].astype(np.float64))
    x, y = np.concatenate(xs), np.concatenate(ys)
    b = np.minimum((x * bins).astype(np.int64), bins - 1)
    order = np.lexsort((y, b))
    b, y = b[order], y[order]
    edges = np.flatnonzero(np.diff(b)) + 1
    total = 0.0
    for seg in np.split(y, edges):
        total += np.abs(seg - np.median(seg)).sum()
    return float(total / y.size)
