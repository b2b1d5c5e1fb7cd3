"""JSON-lines cohort manifest: one patient per line, volume paths relative to the file."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from .volume import (
    PatientRecord,
    Split,
    read_labels,
    read_mask,
    read_volume,
    write_labels,
    write_mask,
    write_volume,
)

PathLike = Union[str, os.PathLike]
MANIFEST_NAME = "manifest.jsonl"


class ManifestError(ValueError):
    pass


def write_patient(p: PatientRecord, root: PathLike) -> dict:
    """Write one patient's volumes under ``root/<patient_id>/`` and return its manifest entry."""
    root = Path(root)
    d = root / p.patient_id
    entry = {
        "patient_id": p.patient_id,
        "split": p.split.value,
        "condition": p.condition.value,
        "body_weight": float(p.body_weight),
        "injected_dose": float(p.injected_dose),
        "dims": [int(n) for n in p.shape],
        "ct": str(write_volume(p.ct, d / "ct.vvol").relative_to(root)),
        "labels": str(write_labels(p.district_mask, d / "labels.vvol").relative_to(root)),
        "pet": None,
        "lesions": None,
    }
    if p.pet is not None:
        entry["pet"] = str(write_volume(p.pet, d / "pet.vvol").relative_to(root))
    if p.lesion_mask is not None:
        entry["lesions"] = str(write_mask(p.lesion_mask, d / "lesions.vvol", p.ct.spacing,
                                          p.ct.origin).relative_to(root))
    if p.extra:
        entry["extra"] = p.extra
    return entry


def write_manifest(records: Iterable[PatientRecord], root: PathLike) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(write_patient(p, root), sort_keys=True) for p in records]
    path = root / MANIFEST_NAME
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_entries(path: PathLike) -> List[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"manifest {path} not found")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        for key in ("patient_id", "split", "ct", "labels"):
            if key not in entry:
                raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
        entry["_root"] = str(path.parent)
        entries.append(entry)
    return entries


def load_patient(entry: dict) -> PatientRecord:
    root = Path(entry["_root"])
    pet = read_volume(root / entry["pet"]) if entry.get("pet") else None
    lesions = read_mask(root / entry["lesions"]) if entry.get("lesions") else None
    return PatientRecord(
        entry["patient_id"], read_volume(root / entry["ct"]), read_labels(root / entry["labels"]),
        pet, lesions, entry.get("condition", "NEGATIVE_CONTROL"),
        entry.get("body_weight", 70.0), entry.get("injected_dose", 325e6), entry["split"],
        entry.get("extra", {}))


def read_manifest(path: PathLike, splits: Optional[Sequence[Union[Split, str]]] = None
                  ) -> List[PatientRecord]:
    wanted = None if splits is None else {Split(s.upper()) if isinstance(s, str) else Split(s)
                                          for s in splits}
    return [load_patient(e) for e in read_entries(path)
            if wanted is None or Split(e["split"]) in wanted]
