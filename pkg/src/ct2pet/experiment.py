"""District-specific vs whole-body comparison on a phantom cohort."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .evaluation import MetricRecord, evaluate_patient, mae, paired_ttest
from .inference import translate_patient, translate_patient_wholebody
from .models import Arch
from .phantom import PhantomConfig, analytic_pet, phantom_dataset
from .training import REPORTING_SEEDS, TrainConfig, train_model
from .volume import LESION, N_DISTRICTS, WHOLE_BODY, PatientRecord, Split

log = logging.getLogger(__name__)


def toy_train_config(**overrides) -> TrainConfig:
    """Reduced budget used for desk-scale comparisons."""
    base = dict(total_epochs=40, decay_start_epoch=30, patches_per_epoch=50, val_every=10,
                base_channels=16, depth=3, disc_levels=2)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class SeedResult:
    seed: int
    records: List[MetricRecord]
    seconds: float

    def values(self, method: str, scope: int, metric: str) -> Dict[str, float]:
        return {r.patient_id: r.value(metric) for r in self.records
                if r.method == method and r.scope == scope}

    def mean(self, method: str, scope: int, metric: str) -> float:
        v = [x for x in self.values(method, scope, metric).values() if np.isfinite(x)]
        return float(np.mean(v))


@dataclass
class ComparisonResult:
    seeds: List[SeedResult] = field(default_factory=list)
    lesion_baseline: Dict[str, float] = field(default_factory=dict)

    def patient_mae(self, method: str) -> Dict[str, float]:
        """Whole-body MAE per test patient, averaged over seeds."""
        per = {}
        for s in self.seeds:
            for pid, v in s.values(method, WHOLE_BODY, "mae").items():
                per.setdefault(pid, []).append(v)
        return {pid: float(np.mean(v)) for pid, v in sorted(per.items())}

    def ttest(self):
        a, b = self.patient_mae("proposed"), self.patient_mae("competitor")
        pids = sorted(a)
        return paired_ttest([a[p] for p in pids], [b[p] for p in pids])


def lesion_blind_baseline(test: Sequence[PatientRecord], c: PhantomConfig) -> Dict[str, float]:
    """MAE of the analytic district transfer inside lesions and in the rest of the trunk."""
    les, trunk = [], []
    for p in test:
        if p.lesion_mask is None:
            continue
        pred = analytic_pet(p.ct.data, p.district_mask.labels, c)
        lm = p.lesion_mask.indicator
        les.append(mae(pred, p.pet, lm))
        trunk.append(mae(pred, p.pet, (p.district_mask.labels == 2) & ~lm))
    return {"lesion_mae": float(np.mean(les)) if les else float("nan"),
            "trunk_mae": float(np.mean(trunk)) if trunk else float("nan"),
            "n_patients": len(les)}


def run_seed(train: Sequence[PatientRecord], val: Sequence[PatientRecord],
             test: Sequence[PatientRecord], tc: TrainConfig, arch: Arch = Arch.PIX2PIX,
             out_dir: Optional[Path] = None, select_best: bool = True) -> SeedResult:
    """Train the four district models and the whole-body model, then score both pipelines.

    With ``select_best`` each model is evaluated at its best validation epoch.
    """
    t0 = time.time()
    models = {}
    for scope in list(range(1, N_DISTRICTS + 1)) + [WHOLE_BODY]:
        sub = out_dir / f"scope_{scope}" if out_dir else None
        bundle, tlog = train_model(scope, arch, train, tc, val=val, out_dir=sub)
        if select_best and tlog.best_state is not None:
            for name, state in tlog.best_state.items():
                bundle.nets[name].load_state_dict(state)
        models[scope] = bundle
        log.info("seed %d scope %d trained (%.0fs)", tc.seed, scope, time.time() - t0)
    district = {i: models[i] for i in range(1, N_DISTRICTS + 1)}
    records = []
    for p in test:
        yp = translate_patient(district, p, tc.patch_size, tc.overlap)
        yc = translate_patient_wholebody(models[WHOLE_BODY], p, tc.patch_size, tc.overlap)
        records += evaluate_patient(yp, p, "proposed", arch.value)
        records += evaluate_patient(yc, p, "competitor", arch.value)
    return SeedResult(tc.seed, records, time.time() - t0)


def run_comparison(pc: PhantomConfig, tc: TrainConfig, seeds: Sequence[int] = REPORTING_SEEDS,
                   out_dir: Optional[Path] = None,
                   records: Optional[Sequence[PatientRecord]] = None) -> ComparisonResult:
    records = list(records) if records is not None else phantom_dataset(pc)
    train = [p for p in records if p.split is Split.TRAIN]
    val = [p for p in records if p.split is Split.VAL]
    test = [p for p in records if p.split is Split.TEST]
    result = ComparisonResult(lesion_baseline=lesion_blind_baseline(test, pc))
    for seed in seeds:
        sub = Path(out_dir) / f"seed_{seed}" if out_dir else None
        result.seeds.append(run_seed(train, val, test, dataclasses.replace(tc, seed=seed), out_dir=sub))
    return result


def summarize(result: ComparisonResult) -> str:
    lines = []
    for s in result.seeds:
        parts = [f"seed {s.seed} ({s.seconds:.0f}s)"]
        for metric in ("mae", "psnr", "ssim"):
            parts.append(f"{metric} proposed {s.mean('proposed', WHOLE_BODY, metric):.4f} "
                         f"competitor {s.mean('competitor', WHOLE_BODY, metric):.4f}")
        if s.values("proposed", LESION, "mae"):
            parts.append(f"lesion mae proposed {s.mean('proposed', LESION, 'mae'):.4f}")
        lines.append("; ".join(parts))
    t, p = result.ttest()
    lb = result.lesion_baseline
    lines.append(f"paired t-test on per-patient whole-body MAE: t = {t:.3f}, p = {p:.3g}")
    lines.append(f"lesion-blind analytic baseline: lesion MAE {lb['lesion_mae']:.4f}, "
                 f"trunk MAE {lb['trunk_mae']:.4f}")
    return "\n".join(lines)
