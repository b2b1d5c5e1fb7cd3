"""Region-restricted image metrics, cohort aggregation, paired tests and report tables."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, special

from .districts import binary_masks
from .volume import (
    DISTRICT_NAMES,
    LESION,
    WHOLE_BODY,
    BinaryMask,
    Condition,
    PatientRecord,
    ShapeError,
    Volume,
)

log = logging.getLogger(__name__)

METRICS = ("mae", "psnr", "ssim")
PSNR_MAX = 1.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 3  # 7^3 window
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0
P_FLOOR = 1e-12  # p-values below this are reported as "<1e-12"

REPORT_SCOPES = (1, 2, 3, 4, WHOLE_BODY)
REPORT_CONDITIONS = (Condition.LYMPHOMA, Condition.NSCLC, Condition.MELANOMA, Condition.NEGATIVE_CONTROL)


class RegionError(ValueError):
    pass


class PairingError(ValueError):
    pass


class ReportError(ValueError):
    pass


def scope_label(scope: int) -> str:
    if scope == WHOLE_BODY:
        return "whole_body"
    if scope == LESION:
        return "lesion"
    return DISTRICT_NAMES[scope]


# --------------------------------------------------------------------------
# metrics

def _arrays(pred, ref, region) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    r = ref.data if isinstance(ref, Volume) else np.asarray(ref)
    m = region.indicator if isinstance(region, BinaryMask) else np.asarray(region, dtype=bool)
    if p.shape != r.shape or m.shape != p.shape:
        raise ShapeError(f"grid mismatch: pred {p.shape}, ref {r.shape}, region {m.shape}")
    if not m.any():
        raise RegionError("empty evaluation region")
    return p.astype(np.float64), r.astype(np.float64), m


def mae(pred, ref, region) -> float:
    p, r, m = _arrays(pred, ref, region)
    return float(np.abs(p[m] - r[m]).mean())


def psnr(pred, ref, region) -> float:
    """PSNR in dB with peak 1.0; identical inputs give +inf."""
    p, r, m = _arrays(pred, ref, region)
    mse = float(((p[m] - r[m]) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PSNR_MAX ** 2 / mse)


def _local_mean(a: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)


def ssim_map(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    c1, c2 = (SSIM_K1 * SSIM_L) ** 2, (SSIM_K2 * SSIM_L) ** 2
    mp, mr = _local_mean(p), _local_mean(r)
    vp = _local_mean(p * p) - mp * mp
    vr = _local_mean(r * r) - mr * mr
    cov = _local_mean(p * r) - mp * mr
    return ((2 * mp * mr + c1) * (2 * cov + c2)) / ((mp * mp + mr * mr + c1) * (vp + vr + c2))


def ssim3d(pred, ref, region) -> float:
    """Gaussian-window SSIM over the whole grid, averaged over region voxels.

    Borders use mirror reflection. The region's bounding box must span at
    least one window along every axis.
    """
    p, r, m = _arrays(pred, ref, region)
    idx = np.argwhere(m)
    extent = idx.max(0) - idx.min(0) + 1
    if np.any(extent < 2 * SSIM_RADIUS + 1):
        raise RegionError(f"region bounding box {tuple(int(e) for e in extent)} is smaller than "
                          f"the {2 * SSIM_RADIUS + 1}^3 SSIM window")
    return float(ssim_map(p, r)[m].mean())


# --------------------------------------------------------------------------
# per-patient records

@dataclass(frozen=True)
class MetricRecord:
    patient_id: str
    scope: int
    condition: Condition
    arch: str
    method: str
    mae: float
    psnr: float
    ssim: float

    def value(self, metric: str) -> float:
        return getattr(self, metric)


def evaluate_patient(pred: Union[Volume, np.ndarray], p: PatientRecord, method: str = "proposed",
                     arch: str = "pix2pix") -> List[MetricRecord]:
    """Records for each nonempty district, the whole body and the lesion mask."""
    if p.pet is None:
        raise ValueError(f"patient {p.patient_id} has no reference PET")
    regions: List[Tuple[int, np.ndarray]] = []
    for mk in binary_masks(p.district_mask):
        if mk.indicator.any():
            regions.append((mk.district_id, mk.indicator))
        else:
            log.info("patient %s: %s is empty, skipped", p.patient_id, scope_label(mk.district_id))
    regions.append((WHOLE_BODY, p.district_mask.labels != 0))
    if p.lesion_mask is not None and p.lesion_mask.indicator.any():
        regions.append((LESION, p.lesion_mask.indicator))
    out = []
    for scope, region in regions:
        try:
            s = ssim3d(pred, p.pet, region)
        except RegionError as exc:
            log.info("patient %s %s: ssim undefined (%s)", p.patient_id, scope_label(scope), exc)
            s = math.nan
        out.append(MetricRecord(p.patient_id, scope, p.condition, arch, method,
                                mae(pred, p.pet, region), psnr(pred, p.pet, region), s))
    return out


# --------------------------------------------------------------------------
# aggregation and tests

@dataclass(frozen=True)
class GroupStat:
    mean: float
    se: float
    n: int
    excluded: int = 0  # non-finite values left out (e.g. infinite PSNR)


def mean_se(values: Iterable[float]) -> GroupStat:
    vals = np.asarray(list(values), dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    excluded = int(vals.size - finite.size)
    if excluded:
        log.info("%d non-finite value(s) excluded from averaging", excluded)
    n = int(finite.size)
    if n == 0:
        return GroupStat(math.nan, math.nan, 0, excluded)
    se = float(finite.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return GroupStat(float(finite.mean()), se, n, excluded)


def _key(rec: MetricRecord, name: str):
    v = getattr(rec, name)
    return v.value if isinstance(v, Condition) else v


def aggregate(records: Sequence[MetricRecord], group_by: Sequence[str]
              ) -> Dict[tuple, Dict[str, GroupStat]]:
    """Mean and standard error of every metric per group."""
    if not records:
        raise ReportError("no records to aggregate")
    groups: Dict[tuple, List[MetricRecord]] = {}
    for r in records:
        groups.setdefault(tuple(_key(r, g) for g in group_by), []).append(r)
    return {k: {m: mean_se(r.value(m) for r in rs) for m in METRICS} for k, rs in sorted(
        groups.items(), key=lambda kv: tuple(str(x) for x in kv[0]))}


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-tailed paired t-test on a - b.

    All-zero differences give (0, 1); constant nonzero differences give
    (+-inf, 0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise PairingError(f"paired samples must have equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise PairingError(f"need at least 2 pairs, got {n}")
    d = a - b
    md = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if md == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, md), 0.0
    t = float(md / (sd / math.sqrt(n)))
    p = float(2.0 * special.stdtr(n - 1, -abs(t)))
    return t, min(p, 1.0)


def format_p(p: float) -> str:
    return f"<{P_FLOOR:g}" if p < P_FLOOR else f"{p:.4g}"


@dataclass(frozen=True)
class TTestRow:
    metric: str
    scope: int
    a: Tuple[str, str]  # (method, arch)
    b: Tuple[str, str]
    n: int
    t: float
    p: float


def compare_methods(records: Sequence[MetricRecord]) -> List[TTestRow]:
    """Paired tests between every two (method, arch) columns per (metric, scope).

    Patients are matched by id; pairs with a non-finite value on either side
    are dropped.
    """
    columns = sorted({(r.method, r.arch) for r in records})
    table: Dict[tuple, float] = {}
    for r in records:
        for m in METRICS:
            table[(m, r.scope, (r.method, r.arch), r.patient_id)] = r.value(m)
    rows = []
    scopes = sorted({r.scope for r in records}, key=lambda s: (s < 0, s))
    for scope, (ca, cb), metric in itertools.product(
            scopes, itertools.combinations(columns, 2), METRICS):
        pids = sorted({r.patient_id for r in records if r.scope == scope})
        pairs = [(table.get((metric, scope, ca, pid)), table.get((metric, scope, cb, pid)))
                 for pid in pids]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None
                 and math.isfinite(x) and math.isfinite(y)]
        if len(pairs) < 2:
            continue
        t, p = paired_ttest([x for x, _ in pairs], [y for _, y in pairs])
        rows.append(TTestRow(metric, scope, ca, cb, len(pairs), t, p))
    return rows


@dataclass
class CohortReport:
    records: List[MetricRecord]
    by_scope: Dict[tuple, Dict[str, GroupStat]] = field(default_factory=dict)
    by_condition: Dict[tuple, Dict[str, GroupStat]] = field(default_factory=dict)
    ttests: List[TTestRow] = field(default_factory=list)

    @property
    def columns(self) -> List[Tuple[str, str]]:
        return sorted({(r.method, r.arch) for r in self.records})


def build_report(records: Sequence[MetricRecord], tests: bool = True) -> CohortReport:
    if not records:
        raise ReportError("no metric records: is the test split empty?")
    records = list(records)
    by_scope = aggregate(records, ("scope", "method", "arch"))
    wb = [r for r in records if r.scope == WHOLE_BODY]
    by_condition = aggregate(wb, ("condition", "method", "arch")) if wb else {}
    ttests = compare_methods(records) if tests else []
    return CohortReport(records, by_scope, by_condition, ttests)


# --------------------------------------------------------------------------
# report files

def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _table_rows(groups, columns, row_keys) -> List[list]:
    """One row per (row key, metric) with mean/se/n for each (method, arch) column."""
    rows = []
    for label, key in row_keys:
        for m in METRICS:
            row = [label, m]
            for method, arch in columns:
                st = groups.get((key, method, arch), {}).get(m)
                row += [_num(st.mean), _num(st.se), str(st.n)] if st else ["", "", "0"]
            rows.append(row)
    return rows


def report_tables(r: CohortReport) -> Dict[str, Tuple[List[str], List[list]]]:
    cols = r.columns
    header = ["group", "metric"] + [f"{method}/{arch}/{s}" for method, arch in cols
                                    for s in ("mean", "se", "n")]
    district = _table_rows(r.by_scope, cols, [(scope_label(s), s) for s in REPORT_SCOPES])
    lesion = _table_rows(r.by_scope, cols, [("lesion", LESION)])
    condition = _table_rows(r.by_condition, cols, [(c.value, c.value) for c in REPORT_CONDITIONS])
    ttests = [[t.metric, scope_label(t.scope), t.a[0], t.a[1], t.b[0], t.b[1], str(t.n),
               _num(t.t), _num(t.p), format_p(t.p)] for t in r.ttests]
    return {
        "district": (header, district),
        "lesion": (header, lesion),
        "condition": (header, condition),
        "ttests": (["metric", "scope", "method_a", "arch_a", "method_b", "arch_b", "n", "t", "p",
                    "p_display"], ttests),
    }


def _text_table(title: str, header: List[str], rows: List[list]) -> str:
    def cell(h, v):
        if h.endswith("/mean") or h.endswith("/se") or h in ("t", "p"):
            return f"{float(v):.4f}" if v not in ("", None) else "-"
        return str(v)

    body = [[cell(h, v) for h, v in zip(header, row)] for row in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def emit_report(r: CohortReport, out_dir: Union[str, os.PathLike]) -> List[Path]:
    """Write per-level CSV tables, per-patient records and a text summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    tables = report_tables(r)
    text = []
    for name, (header, rows) in tables.items():
        if name == "ttests" and not rows:
            continue
        path = out / f"{name}_table.csv" if name != "ttests" else out / "ttests.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)
        text.append(_text_table(f"== {name} ==", header, rows))
    path = out / "records.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "scope", "condition", "method", "arch"] + list(METRICS))
        for rec in r.records:
            w.writerow([rec.patient_id, scope_label(rec.scope), rec.condition.value, rec.method,
                        rec.arch] + [_num(rec.value(m)) for m in METRICS])
    written.append(path)
    path = out / "report.txt"
    path.write_text("\n".join(text))
    written.append(path)
    return written
