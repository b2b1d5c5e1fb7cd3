"""Sliding-window translation of districts and whole bodies."""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Sequence, Union

import numpy as np
import torch.nn as nn

from .districts import DistrictBundle, extract_bundles
from .models import ModelBundle, generator_forward, scope_name
from .patches import OVERLAP, PATCH_SIZE, Stitcher, assemble, pad_to_min, patch_grid, unpad
from .volume import N_DISTRICTS, WHOLE_BODY, Modality, PatientRecord, Unit, Volume

PatchFn = Callable[[np.ndarray], np.ndarray]
Generator = Union[ModelBundle, nn.Module, PatchFn]


class OrchestrationError(RuntimeError):
    pass


def _patch_fn(g: Generator) -> PatchFn:
    if isinstance(g, (ModelBundle, nn.Module)):
        return lambda x: generator_forward(g, x)
    if callable(g):
        return g
    raise TypeError(f"cannot use {type(g).__name__} as a generator")


def _check_scope(g: Generator, scope: int) -> None:
    if isinstance(g, ModelBundle) and g.scope != scope:
        raise OrchestrationError(
            f"model trained for {scope_name(g.scope)} cannot translate {scope_name(scope)}")


def sliding_window(ct: np.ndarray, g: Generator, s: int = PATCH_SIZE, o: int = OVERLAP,
                   mask: np.ndarray = None) -> np.ndarray:
    """Translate ``ct`` window by window and average the overlaps.

    With ``mask`` given, windows containing no mask voxel are not sent through
    the generator; they contribute zeros, which can only reach voxels outside
    the mask.
    """
    fn = _patch_fn(g)
    padded, record = pad_to_min(ct, s)
    pmask = pad_to_min(mask, s)[0] if mask is not None else None
    grid = patch_grid(padded.shape, s, o)
    acc = Stitcher(padded.shape)
    zeros = np.zeros((s, s, s), dtype=np.float32)
    for start in grid.starts:
        sl = grid.slices(start)
        if pmask is not None and not pmask[sl].any():
            acc.add(zeros, start)
            continue
        out = np.asarray(fn(padded[sl]), dtype=np.float32)
        if out.shape != (s, s, s):
            raise OrchestrationError(f"generator returned shape {out.shape} for a {s}^3 patch")
        acc.add(out, start)
    return unpad(acc.result(), record)


def translate_district(g: Generator, b: DistrictBundle, s: int = PATCH_SIZE,
                       o: int = OVERLAP) -> Volume:
    _check_scope(g, b.district_id)
    ind = b.mask.indicator
    if not ind.any():
        out = np.zeros(b.ct.shape, dtype=np.float32)
    else:
        out = sliding_window(b.ct.data, g, s, o, mask=ind)
        out = np.where(ind, out, np.float32(0))
    return Volume(out, b.ct.spacing, b.ct.origin, Modality.SYNTH_PET, Unit.NORMALIZED)


def _models_by_scope(models) -> Dict[int, Generator]:
    if isinstance(models, Mapping):
        return {int(k): v for k, v in models.items()}
    models = list(models)
    if all(isinstance(m, ModelBundle) for m in models):
        return {m.scope: m for m in models}
    return {i + 1: m for i, m in enumerate(models)}


def translate_patient(models: Union[Mapping[int, Generator], Sequence[Generator]],
                      p: PatientRecord, s: int = PATCH_SIZE, o: int = OVERLAP) -> Volume:
    """District-specific pipeline: translate each district, then assemble."""
    by_scope = _models_by_scope(models)
    missing = [scope_name(i) for i in range(1, N_DISTRICTS + 1) if i not in by_scope]
    if missing:
        raise OrchestrationError(f"missing district model(s): {', '.join(missing)}")
    parts = []
    for b in extract_bundles(p):
        parts.append((translate_district(by_scope[b.district_id], b, s, o), b.mask))
    out = assemble(parts, p.shape)
    return Volume(out, p.ct.spacing, p.ct.origin, Modality.SYNTH_PET, Unit.NORMALIZED)


def translate_patient_wholebody(g: Generator, p: PatientRecord, s: int = PATCH_SIZE,
                                o: int = OVERLAP) -> Volume:
    """Single-model competitor: every window of the full CT, background zeroed."""
    _check_scope(g, WHOLE_BODY)
    out = sliding_window(p.ct.data, g, s, o)
    out = np.where(p.district_mask.labels != 0, out, np.float32(0))
    return Volume(out, p.ct.spacing, p.ct.origin, Modality.SYNTH_PET, Unit.NORMALIZED)
