"""Volumetric data model, element-wise mask algebra and the native ``.vvol`` format.

A ``.vvol`` volume is two files sitting next to each other:

* ``name.vvol``: a UTF-8 JSON header (see ``_HEADER_FIELDS``)
* ``name.raw``: the payload, little-endian, x-fastest (Fortran) order

The payload dtype is ``float32`` for intensity volumes and ``uint8`` for label
and binary masks. Reading checks every header field and the payload byte count.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

FORMAT_NAME = "vvol"
FORMAT_VERSION = 1

N_DISTRICTS = 4
WHOLE_BODY = 0
LESION = -1

DISTRICT_NAMES = {1: "head", 2: "trunk", 3: "arms", 4: "legs"}
DISTRICT_IDS = {name: i for i, name in DISTRICT_NAMES.items()}

PathLike = Union[str, os.PathLike]
Triple = Tuple[float, float, float]


class Modality(str, enum.Enum):
    CT = "CT"
    PET = "PET"
    SYNTH_PET = "SYNTH_PET"


class Unit(str, enum.Enum):
    HU = "HU"
    BQ_PER_ML = "BQ_PER_ML"
    SUV = "SUV"
    NORMALIZED = "NORMALIZED"


class Condition(str, enum.Enum):
    LYMPHOMA = "LYMPHOMA"
    NSCLC = "NSCLC"
    MELANOMA = "MELANOMA"
    NEGATIVE_CONTROL = "NEGATIVE_CONTROL"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class ShapeError(ValueError):
    pass


class VolumeFormatError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _triple(values, name: str) -> Triple:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    return out  # type: ignore[return-value]


def _check_grid(data: np.ndarray, spacing: Triple) -> None:
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D array, got shape {data.shape}")
    if min(data.shape) < 1:
        raise ShapeError(f"every dimension must be >= 1, got {data.shape}")
    if min(spacing) <= 0:
        raise ValueError(f"spacing components must be > 0, got {spacing}")


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid indexed ``[x, y, z]`` with physical metadata (mm)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    modality: Modality = Modality.CT
    unit: Unit = Unit.NORMALIZED

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "unit", Unit(self.unit))
        _check_grid(data, self.spacing)
        if self.unit is Unit.NORMALIZED and data.size:
            lo, hi = float(data.min()), float(data.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"NORMALIZED volume has values outside [0, 1]: [{lo}, {hi}]")
        if self.unit is Unit.SUV and data.size and float(data.min()) < 0.0:
            raise ValueError("SUV volume has negative values")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)


@dataclass(frozen=True, eq=False)
class DistrictLabelMask:
    """Voxel-wise district labels: 0 background, 1 head, 2 trunk, 3 arms, 4 legs."""

    labels: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() > N_DISTRICTS):
            bad = sorted(set(np.unique(labels).tolist()) - set(range(N_DISTRICTS + 1)))
            raise ValueError(f"district labels must lie in 0..4, found {bad}")
        labels = labels.astype(np.uint8, copy=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        _check_grid(labels, self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def body(self) -> "BinaryMask":
        """Union of the four districts."""
        return BinaryMask(self.labels != 0, WHOLE_BODY)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Indicator volume. ``district_id`` is 1..4, ``WHOLE_BODY`` or ``LESION``."""

    indicator: np.ndarray
    district_id: int = WHOLE_BODY

    def __post_init__(self):
        ind = np.asarray(self.indicator)
        if ind.dtype != np.bool_:
            if ind.size and not np.isin(ind, (0, 1)).all():
                raise ValueError("binary mask values must be 0 or 1")
            ind = ind.astype(bool)
        if ind.ndim != 3:
            raise ShapeError(f"expected a 3D mask, got shape {ind.shape}")
        object.__setattr__(self, "indicator", ind)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.indicator.shape  # type: ignore[return-value]

    def count(self) -> int:
        return int(self.indicator.sum())


@dataclass(eq=False)
class PatientRecord:
    patient_id: str
    ct: Volume
    district_mask: DistrictLabelMask
    pet: Optional[Volume] = None
    lesion_mask: Optional[BinaryMask] = None
    condition: Condition = Condition.NEGATIVE_CONTROL
    body_weight: float = 70.0
    injected_dose: float = 325e6
    split: Split = Split.TRAIN
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.condition = Condition(self.condition)
        self.split = Split(self.split)
        if self.body_weight <= 0 or self.injected_dose <= 0:
            raise ValueError("body_weight and injected_dose must be > 0")
        shape = self.ct.shape
        _same_grid(shape, self.district_mask.shape)
        if self.pet is not None:
            _same_grid(shape, self.pet.shape)
        if self.lesion_mask is not None:
            _same_grid(shape, self.lesion_mask.shape)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.ct.shape


def _same_grid(*shapes: Sequence[int]) -> None:
    first = tuple(shapes[0])
    for s in shapes[1:]:
        if tuple(s) != first:
            raise ShapeError(f"grid mismatch: {first} vs {tuple(s)}")


def _indicator(m) -> np.ndarray:
    return m.indicator if isinstance(m, BinaryMask) else np.asarray(m, dtype=bool)


def mask_apply(v: Volume, m: BinaryMask) -> Volume:
    """Zero every voxel of ``v`` outside ``m``."""
    ind = _indicator(m)
    _same_grid(v.shape, ind.shape)
    return v.with_data(np.where(ind, v.data, np.float32(0)).astype(np.float32))


def volume_union_overwrite(dst: Volume, src: Volume, m: BinaryMask) -> Volume:
    """Take ``src`` where ``m`` is set and ``dst`` elsewhere."""
    ind = _indicator(m)
    _same_grid(dst.shape, src.shape, ind.shape)
    return dst.with_data(np.where(ind, src.data, dst.data).astype(np.float32))


# --------------------------------------------------------------------------
# native format

_KINDS = {"volume": "float32", "labels": "uint8", "mask": "uint8"}
_HEADER_FIELDS = ("format", "version", "kind", "dims", "spacing", "origin",
                  "modality", "unit", "dtype", "endianness", "order", "payload")


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def _write(path: PathLike, kind: str, array: np.ndarray, spacing, origin,
           modality: Optional[str] = None, unit: Optional[str] = None, extra=None) -> Path:
    path = Path(path)
    if path.suffix != ".vvol":
        path = path.with_suffix(".vvol")
    dtype = np.dtype(_KINDS[kind]).newbyteorder("<")
    payload = _payload_path(path)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "dims": [int(d) for d in array.shape],
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "modality": modality,
        "unit": unit,
        "dtype": _KINDS[kind],
        "endianness": "little",
        "order": "x-fastest",
        "payload": payload.name,
    }
    if extra:
        header["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    payload.write_bytes(np.asarray(array, dtype=dtype).tobytes(order="F"))
    path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path


def _read(path: PathLike, kind: str):
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError("header", f"not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise VolumeFormatError("header", "expected a JSON object")
    for name in _HEADER_FIELDS:
        if name not in header:
            raise VolumeFormatError(name, "missing from header")
    if header["format"] != FORMAT_NAME:
        raise VolumeFormatError("format", f"expected {FORMAT_NAME!r}, got {header['format']!r}")
    if header["version"] != FORMAT_VERSION:
        raise VolumeFormatError("version", f"unsupported version {header['version']!r}")
    if header["kind"] != kind:
        raise VolumeFormatError("kind", f"expected {kind!r}, got {header['kind']!r}")
    if header["dtype"] != _KINDS[kind]:
        raise VolumeFormatError("dtype", f"expected {_KINDS[kind]!r}, got {header['dtype']!r}")
    if header["endianness"] != "little":
        raise VolumeFormatError("endianness", f"unsupported {header['endianness']!r}")
    if header["order"] != "x-fastest":
        raise VolumeFormatError("order", f"unsupported {header['order']!r}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d >= 1 for d in dims)):
        raise VolumeFormatError("dims", f"expected three positive integers, got {dims!r}")
    for name in ("spacing", "origin"):
        vals = header[name]
        if not isinstance(vals, list) or len(vals) != 3:
            raise VolumeFormatError(name, f"expected three numbers, got {vals!r}")
    if min(header["spacing"]) <= 0:
        raise VolumeFormatError("spacing", "components must be > 0")
    dtype = np.dtype(_KINDS[kind]).newbyteorder("<")
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = path.parent / header["payload"]
    if not payload.exists():
        raise VolumeFormatError("payload", f"file {payload} not found")
    raw = payload.read_bytes()
    if len(raw) != expected:
        raise VolumeFormatError(
            "payload", f"expected {expected} bytes for dims {dims}, found {len(raw)}")
    array = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    return header, np.array(array, dtype=dtype.newbyteorder("="), order="C")


def write_volume(v: Volume, path: PathLike) -> Path:
    return _write(path, "volume", v.data, v.spacing, v.origin, v.modality.value, v.unit.value)


def read_volume(path: PathLike) -> Volume:
    header, data = _read(path, "volume")
    try:
        modality = Modality(header["modality"])
    except ValueError:
        raise VolumeFormatError("modality", f"unknown modality {header['modality']!r}") from None
    try:
        unit = Unit(header["unit"])
    except ValueError:
        raise VolumeFormatError("unit", f"unknown unit {header['unit']!r}") from None
    return Volume(data, tuple(header["spacing"]), tuple(header["origin"]), modality, unit)


def write_labels(m: DistrictLabelMask, path: PathLike) -> Path:
    return _write(path, "labels", m.labels, m.spacing, m.origin)


def read_labels(path: PathLike) -> DistrictLabelMask:
    header, data = _read(path, "labels")
    return DistrictLabelMask(data, tuple(header["spacing"]), tuple(header["origin"]))


def write_mask(m: BinaryMask, path: PathLike, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Path:
    return _write(path, "mask", m.indicator.astype(np.uint8), spacing, origin,
                  extra={"district_id": int(m.district_id)})


def read_mask(path: PathLike) -> BinaryMask:
    header, data = _read(path, "mask")
    if data.size and data.max() > 1:
        raise VolumeFormatError("payload", "binary mask payload has values other than 0/1")
    district_id = int(header.get("extra", {}).get("district_id", WHOLE_BODY))
    return BinaryMask(data.astype(bool), district_id)


# --------------------------------------------------------------------------
# NIfTI-1 import (read-only)

_NIFTI_DTYPES = {np.dtype(np.float32), np.dtype(np.int16)}
_NIFTI_LABEL_DTYPES = _NIFTI_DTYPES | {np.dtype(np.uint8), np.dtype(np.int32), np.dtype(np.uint16)}


def _load_nifti(path: PathLike, allowed):
    import nibabel as nib

    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad files
        raise VolumeFormatError("header", f"cannot parse NIfTI file {path}: {exc}") from None
    header = img.header
    dtype = header.get_data_dtype().newbyteorder("=")
    if dtype not in allowed:
        raise VolumeFormatError("datatype", f"unsupported NIfTI datatype {dtype}")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise VolumeFormatError("dim", f"expected a 3D image, got dims {img.shape}")
    spacing = tuple(float(z) for z in header.get_zooms()[:3])
    origin = tuple(float(t) for t in img.affine[:3, 3])
    return img, shape, spacing, origin


def read_nifti(path: PathLike, modality: Modality = Modality.CT, unit: Unit = Unit.HU) -> Volume:
    """Import a NIfTI-1 intensity image; ``scl_slope``/``scl_inter`` are applied."""
    img, shape, spacing, origin = _load_nifti(path, _NIFTI_DTYPES)
    data = np.asarray(img.dataobj, dtype=np.float64).reshape(shape)
    return Volume(data.astype(np.float32), spacing, origin, modality, unit)


def read_nifti_labels(path: PathLike) -> Tuple[np.ndarray, Triple, Triple]:
    """Import an integer label image as ``(labels, spacing, origin)``."""
    img, shape, spacing, origin = _load_nifti(path, _NIFTI_LABEL_DTYPES)
    data = np.asarray(img.dataobj).reshape(shape)
    return np.rint(data).astype(np.int64), spacing, origin
