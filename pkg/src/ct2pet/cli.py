"""Command-line interface: phantom, preprocess, train, translate, evaluate.

Every error is printed to stderr as ``ct2pet: error: <message>`` and the
process exits with status 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, load_config
from .districts import LabelCollapseMap, collapse_overlapping, partition_check, binary_masks
from .evaluation import build_report, emit_report, evaluate_patient, ReportError
from .inference import translate_patient, translate_patient_wholebody
from .manifest import MANIFEST_NAME, read_entries, load_patient, write_patient
from .models import Arch, CheckpointError, config_hash, load_checkpoint, parse_scope, scope_name
from .phantom import phantom_dataset
from .preprocess import Grid, RigidTransform, SuvParams, preprocess_pair, resample_nearest
from .training import train_model
from .volume import (
    N_DISTRICTS,
    WHOLE_BODY,
    BinaryMask,
    Condition,
    DistrictLabelMask,
    Modality,
    PatientRecord,
    Split,
    Unit,
    read_nifti,
    read_nifti_labels,
    read_volume,
    write_volume,
)

log = logging.getLogger("ct2pet")

ERROR_PREFIX = "ct2pet: error:"
RUN_FILE = "run.json"


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers

def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set or [])


def _records(manifest, split: Split):
    entries = [e for e in read_entries(manifest) if Split(e["split"]) is split]
    return [load_patient(e) for e in entries]


def _lineage_hash(scope: int, arch: Arch, cfg: ExperimentConfig) -> str:
    train = dataclasses.asdict(cfg.train)
    return config_hash({"scope": scope, "arch": arch.value, "train": train})


def _scopes(text: str) -> List[int]:
    if text == "all":
        return list(range(1, N_DISTRICTS + 1)) + [WHOLE_BODY]
    if text == "districts":
        return list(range(1, N_DISTRICTS + 1))
    return [parse_scope(text)]


# --------------------------------------------------------------------------
# phantom

def cmd_phantom(args) -> int:
    cfg = _config(args)
    pc = cfg.phantom
    if args.n is not None:
        pc = dataclasses.replace(pc, n_patients=args.n)
    if args.seed is not None:
        pc = dataclasses.replace(pc, seed=args.seed)
    out = Path(args.out)
    records = phantom_dataset(pc, out_dir=out)
    counts = {s.value: sum(p.split is s for p in records) for s in Split}
    print(out / MANIFEST_NAME)
    print(" ".join(f"{k.lower()}={v}" for k, v in counts.items()))
    return 0


# --------------------------------------------------------------------------
# preprocess (real data import)

def cmd_preprocess(args) -> int:
    table = LabelCollapseMap.load(args.collapse_map)
    ct_hu = read_nifti(args.ct, Modality.CT, Unit.HU)
    pet_bq = read_nifti(args.pet, Modality.PET, Unit.BQ_PER_ML)
    transform = None
    if args.transform:
        transform = RigidTransform.from_matrix(np.loadtxt(args.transform).reshape(4, 4))
    ct, pet = preprocess_pair(ct_hu, pet_bq, SuvParams(args.weight, args.dose), transform)
    grid = Grid.of(pet)
    raws = []
    for path in args.labels:
        labels, spacing, origin = read_nifti_labels(path)
        raws.append(resample_nearest(labels, spacing, origin, grid, transform))
    mask = collapse_overlapping(raws, table, grid.spacing, grid.origin)
    report = partition_check(binary_masks(mask), mask)
    if not report:
        raise CliError(f"district partition check failed: {report}")
    lesion = None
    if args.lesions:
        les, spacing, origin = read_nifti_labels(args.lesions)
        lesion = BinaryMask(resample_nearest(les, spacing, origin, grid, transform) > 0)
    p = PatientRecord(args.id, ct, DistrictLabelMask(mask.labels, grid.spacing, grid.origin), pet,
                      lesion, Condition(args.condition.upper()), args.weight, args.dose,
                      Split(args.split.upper()))
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    entry = write_patient(p, root)
    path = root / MANIFEST_NAME
    lines = path.read_text().splitlines() if path.exists() else []
    lines = [line for line in lines if line.strip() and json.loads(line)["patient_id"] != args.id]
    lines.append(json.dumps(entry, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines))
    print(path)
    return 0


# --------------------------------------------------------------------------
# train

def _train_one(manifest: str, scope: int, arch: str, cfg: ExperimentConfig, out: str,
               resume: bool) -> str:
    arch = Arch(arch)
    lineage = Path(out) / scope_name(scope)
    run_file = lineage / RUN_FILE
    lhash = _lineage_hash(scope, arch, cfg)
    resume_from = None
    if resume:
        last = lineage / "last.ckpt"
        if not last.exists():
            raise CliError(f"cannot resume {scope_name(scope)}: {last} not found")
        resume_from = last
    elif run_file.exists():
        previous = json.loads(run_file.read_text()).get("lineage_hash")
        if previous != lhash:
            raise CliError(f"checkpoint directory {lineage} holds a run with a different "
                           f"configuration ({previous} != {lhash}); choose another --out")
    train = _records(manifest, Split.TRAIN)
    val = _records(manifest, Split.VAL)
    if not train:
        raise CliError("manifest has no TRAIN patients")
    bundle, tlog = train_model(scope, arch, train, cfg.train, val=val, out_dir=lineage,
                               resume_from=resume_from)
    info = {"scope": scope_name(scope), "arch": arch.value, "lineage_hash": lhash,
            "model_hash": bundle.config_hash(), "epoch": bundle.epoch,
            "best_epoch": tlog.best_epoch, "best_val_mae": tlog.best_val_mae,
            "train_config": dataclasses.asdict(cfg.train)}
    run_file.write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return str(lineage)


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    scopes = _scopes(args.scope)
    jobs = [(args.manifest, s, args.arch, cfg, args.out, args.resume) for s in scopes]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_train_one, *zip(*jobs)))
    else:
        done = [_train_one(*j) for j in jobs]
    for d in done:
        print(d)
    return 0


# --------------------------------------------------------------------------
# translate

def _checkpoint(models_dir: Path, scope: int, which: str) -> Path:
    path = models_dir / scope_name(scope) / f"{which}.ckpt"
    if not path.exists():
        raise CliError(f"missing checkpoint for scope {scope_name(scope)}: {path}")
    return path


def cmd_translate(args) -> int:
    cfg = _config(args)
    models_dir = Path(args.models)
    split = Split(args.split.upper())
    if args.method == "proposed":
        paths = {s: _checkpoint(models_dir, s, args.checkpoint) for s in range(1, N_DISTRICTS + 1)}
    else:
        paths = {WHOLE_BODY: _checkpoint(models_dir, WHOLE_BODY, args.checkpoint)}
    models = {}
    for s, path in paths.items():
        bundle, _ = load_checkpoint(path)
        if bundle.scope != s:
            raise CliError(f"{path} holds a {scope_name(bundle.scope)} model, expected {scope_name(s)}")
        models[s] = bundle
    archs = {m.arch.value for m in models.values()}
    if len(archs) != 1:
        raise CliError(f"district checkpoints mix architectures: {sorted(archs)}")
    records = _records(args.manifest, split)
    if not records:
        raise CliError(f"manifest has no {split.value} patients")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s, o = next(iter(models.values())).patch_size, cfg.train.overlap
    for p in records:
        if args.method == "proposed":
            y = translate_patient(models, p, s, o)
        else:
            y = translate_patient_wholebody(models[WHOLE_BODY], p, s, o)
        write_volume(y, out / f"{p.patient_id}.vvol")
    run = {"method": args.method, "arch": archs.pop(), "split": split.value,
           "checkpoints": {scope_name(k): {"path": str(v), "model_hash": models[k].config_hash(),
                                           "params": models[k].param_checksum()}
                           for k, v in paths.items()},
           "patients": [p.patient_id for p in records]}
    (out / RUN_FILE).write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    print(out)
    return 0


# --------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args) -> int:
    records = _records(args.manifest, Split.TEST)
    if not records:
        raise ReportError("manifest has no TEST patients; nothing to evaluate")
    labels: List[str] = []
    archs: List[str] = []
    for d in args.pred:
        run_file = Path(d) / RUN_FILE
        run = json.loads(run_file.read_text()) if run_file.exists() else {}
        labels.append(run.get("method", Path(d).name))
        archs.append(run.get("arch", "unknown"))
    if len(set(zip(labels, archs))) < len(labels):
        labels = [Path(d).name for d in args.pred]
    metrics = []
    for d, method, arch in zip(args.pred, labels, archs):
        for p in records:
            path = Path(d) / f"{p.patient_id}.vvol"
            if not path.exists():
                raise CliError(f"missing prediction for patient {p.patient_id} in {d}")
            metrics += evaluate_patient(read_volume(path), p, method, arch)
    report = build_report(metrics, tests=len(args.pred) > 1)
    for path in emit_report(report, args.out):
        print(path)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ct2pet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("phantom", help="generate a synthetic cohort with a manifest")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of patients (overrides phantom.n_patients)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="import one NIfTI CT/PET/labels patient")
    p.add_argument("--ct", required=True)
    p.add_argument("--pet", required=True)
    p.add_argument("--labels", required=True, nargs="+", help="one or more label volumes")
    p.add_argument("--collapse-map", required=True, help="'source_label = district' lines")
    p.add_argument("--lesions")
    p.add_argument("--transform", help="text file with a 4x4 CT-to-PET rigid matrix")
    p.add_argument("--weight", type=float, required=True, help="body weight in kg")
    p.add_argument("--dose", type=float, required=True, help="injected dose in Bq")
    p.add_argument("--id", required=True)
    p.add_argument("--condition", default="negative_control",
                   choices=[c.value.lower() for c in Condition])
    p.add_argument("--split", default="train", choices=[s.value.lower() for s in Split])
    p.add_argument("--out", required=True, help="cohort directory (manifest is updated)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train district and/or whole-body models")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scope", required=True,
                   help="head, trunk, arms, legs, whole_body, districts or all")
    p.add_argument("--arch", default="pix2pix", choices=[a.value for a in Arch])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <out>/<scope>/last.ckpt")
    p.add_argument("--jobs", type=int, default=1, help="concurrent training jobs for scope=all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="synthesize PET for one split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--method", required=True, choices=["proposed", "competitor"])
    p.add_argument("--checkpoint", default="final", choices=["final", "best", "last"])
    p.add_argument("--split", default="test", choices=[s.value.lower() for s in Split])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="metric tables and paired tests for the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, nargs="+", help="one or more prediction directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, CheckpointError, RuntimeError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
