"""Training loop for district-specific and whole-body GANs."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from .districts import DistrictBundle, extract_bundles, whole_body_bundle
from .inference import translate_district, translate_patient_wholebody
from .models import (
    Arch,
    DiscriminatorConfig,
    GeneratorConfig,
    ModelBundle,
    NumericError,
    cyclegan_d_loss,
    cyclegan_g_loss,
    init_params,
    load_checkpoint,
    pix2pix_d_loss,
    pix2pix_g_loss,
    save_checkpoint,
    scope_name,
)
from .patches import PatchPair, PatchSampler
from .volume import WHOLE_BODY, PatientRecord

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss_G", "loss_D", "l1", "lr", "grad_norm", "grad_norm_D")
REPORTING_SEEDS = (17, 23, 42)


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_epochs: int = 150
    decay_start_epoch: int = 101
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    grad_clip_max_norm: float = 5.0
    lambda_l1: float = 100.0
    lambda_cycle: float = 10.0
    patches_per_epoch: Optional[int] = None  # None -> 64 per training patient
    seed: int = 17
    rotation_deg: float = 10.0
    flip_prob: float = 0.5
    noise_sigma: float = 0.01
    augment: bool = True
    val_every: int = 10
    min_in_district_fraction: float = 0.05
    patch_size: int = 32
    overlap: int = 16
    base_channels: int = 16
    depth: int = 3
    disc_levels: int = 3

    def __post_init__(self):
        for f in ("total_epochs", "decay_start_epoch", "batch_size", "val_every", "patch_size",
                  "base_channels", "depth", "disc_levels"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        for f in ("lr", "grad_clip_max_norm", "lambda_l1", "lambda_cycle"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.decay_start_epoch > self.total_epochs:
            raise ConfigError("decay_start_epoch must not exceed total_epochs")
        if self.batch_size != 1:
            raise ConfigError("only batch_size = 1 is supported")
        if self.patches_per_epoch is not None and self.patches_per_epoch < 1:
            raise ConfigError("patches_per_epoch must be positive")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(base_channels=self.base_channels, depth=self.depth,
                               patch_size=self.patch_size)

    def discriminator_config(self, arch: Arch) -> DiscriminatorConfig:
        return DiscriminatorConfig(in_channels=2 if Arch(arch) is Arch.PIX2PIX else 1,
                                   levels=self.disc_levels, base_channels=self.base_channels)

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def lr_at(epoch: int, c: TrainConfig) -> float:
    """Constant rate, then linear decay reaching 0 at the last epoch."""
    if not 1 <= epoch <= c.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{c.total_epochs}")
    if epoch < c.decay_start_epoch:
        return c.lr
    span = c.total_epochs - c.decay_start_epoch + 1
    return c.lr * ((c.total_epochs - epoch) / span)


# --------------------------------------------------------------------------
# augmentation

def _rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _rotate(a: np.ndarray, rot: np.ndarray, order: int) -> np.ndarray:
    center = (np.asarray(a.shape) - 1) / 2.0
    offset = center - rot.T @ center
    return ndimage.affine_transform(a, rot.T, offset=offset, order=order, mode="constant", cval=0.0)


def augment_pair(x_p: np.ndarray, y_p: Optional[np.ndarray], mask_p: Optional[np.ndarray],
                 seed: Union[int, np.random.Generator, None] = None, *,
                 rotation_deg: float = 10.0, flip_prob: float = 0.5, noise_sigma: float = 0.01):
    """Apply one jointly drawn rotation + flip to all inputs, then noise to the CT only."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    angles = rng.uniform(-rotation_deg, rotation_deg, size=3)
    flips = rng.random(3) < flip_prob
    x = np.asarray(x_p, dtype=np.float32)
    y = None if y_p is None else np.asarray(y_p, dtype=np.float32)
    m = None if mask_p is None else np.asarray(mask_p)
    if rotation_deg > 0 and np.any(angles != 0):
        rot = _rotation_matrix(angles)
        x = _rotate(x, rot, 1)
        y = None if y is None else _rotate(y, rot, 1)
        m = None if m is None else _rotate(m.astype(np.uint8), rot, 0).astype(m.dtype)
    for axis in np.flatnonzero(flips):
        x = np.flip(x, axis)
        y = None if y is None else np.flip(y, axis)
        m = None if m is None else np.flip(m, axis)
    if noise_sigma > 0:
        x = np.clip(x + rng.normal(0.0, noise_sigma, size=x.shape), 0.0, 1.0)
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = None if y is None else np.ascontiguousarray(y, dtype=np.float32)
    m = None if m is None else np.ascontiguousarray(m)
    return x, y, m


# --------------------------------------------------------------------------
# training loop

@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_G: float
    loss_D: float
    l1: float
    lr: float
    grad_norm: float
    grad_norm_D: float


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_G: float
    loss_D: float
    l1: float
    val_mae: Optional[float] = None


@dataclass
class TrainLog:
    steps: List[StepRecord] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_mae: Optional[float] = None
    best_state: Optional[Dict[str, dict]] = None  # network weights at best_epoch (this run only)

    @property
    def g_steps(self) -> int:
        return len(self.steps)

    @property
    def d_steps(self) -> int:
        return sum(1 for s in self.steps if not math.isnan(s.loss_D))


def scope_bundles(records: Sequence[PatientRecord], scope: int) -> List[DistrictBundle]:
    if scope == WHOLE_BODY:
        return [whole_body_bundle(p) for p in records]
    return [extract_bundles(p)[scope - 1] for p in records]


def _tensor(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).to(dtype)[None, None]


def _clip(params, max_norm: float) -> float:
    """Clip in place and return the post-clip global norm."""
    params = [p for p in params if p.grad is not None]
    torch.nn.utils.clip_grad_norm_(params, max_norm)
    if not params:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in params])))


def _params(bundle: ModelBundle, names: Sequence[str]):
    return [p for n in names for p in bundle.nets[n].parameters()]


def _augment(pair: PatchPair, c: TrainConfig, rng: np.random.Generator):
    if not c.augment:
        return pair.ct, pair.pet, pair.mask
    return augment_pair(pair.ct, pair.pet, pair.mask, rng, rotation_deg=c.rotation_deg,
                        flip_prob=c.flip_prob, noise_sigma=c.noise_sigma)


def validation_mae(bundle: ModelBundle, records: Sequence[PatientRecord], c: TrainConfig) -> float:
    """Mean over patients of the MAE inside the model's scope mask."""
    values = []
    for p in records:
        if bundle.scope == WHOLE_BODY:
            pred = translate_patient_wholebody(bundle, p, c.patch_size, c.overlap).data
            region = p.district_mask.labels != 0
        else:
            b = extract_bundles(p)[bundle.scope - 1]
            pred = translate_district(bundle, b, c.patch_size, c.overlap).data
            region = b.mask.indicator
        if region.any():
            diff = np.abs(pred[region].astype(np.float64) - p.pet.data[region].astype(np.float64))
            values.append(float(diff.mean()))
    return float(np.mean(values)) if values else float("nan")


class _CsvLog:
    def __init__(self, path: Optional[Path], append: bool):
        self.fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            new = not append or not path.exists()
            self.fh = open(path, "a" if append else "w", newline="")
            self.writer = csv.writer(self.fh)
            if new:
                self.writer.writerow(LOG_COLUMNS)

    def write(self, rec: StepRecord) -> None:
        if self.fh is not None:
            self.writer.writerow([rec.epoch, rec.step] + [repr(float(getattr(rec, k))) for k in LOG_COLUMNS[2:]])

    def flush(self) -> None:
        if self.fh is not None:
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def train_model(scope: int, arch: Union[Arch, str], train: Sequence[PatientRecord],
                c: TrainConfig, val: Sequence[PatientRecord] = (),
                out_dir: Union[str, os.PathLike, None] = None,
                resume_from: Union[str, os.PathLike, None] = None,
                dtype: torch.dtype = torch.float32) -> Tuple[ModelBundle, TrainLog]:
    """Train one model for ``scope`` (district id or ``WHOLE_BODY``).

    Runs ``total_epochs * patches_per_epoch`` optimizer steps. Patch draws in
    epoch ``e`` come from a generator seeded with ``(seed, e)``, so a resumed
    run draws the same patches as an uninterrupted one. With ``out_dir`` set,
    writes ``train_log.csv``, ``last.ckpt``, ``best.ckpt`` and ``final.ckpt``.
    """
    arch = Arch(arch)
    if not train:
        raise ConfigError("training split is empty")
    if arch is Arch.PIX2PIX and any(p.pet is None for p in train):
        raise ConfigError("pix2pix needs paired PET volumes for every training patient")
    out = Path(out_dir) if out_dir is not None else None

    sampler = PatchSampler(scope_bundles(train, scope), c.patch_size, c.min_in_district_fraction)
    steps_per_epoch = c.patches_per_epoch or 64 * len(train)

    optim_state = {}
    if resume_from is not None:
        bundle, optim_state = load_checkpoint(resume_from)
        if bundle.scope != scope or bundle.arch is not arch:
            raise ConfigError(f"checkpoint {resume_from} is for {scope_name(bundle.scope)}/"
                              f"{bundle.arch.value}, not {scope_name(scope)}/{arch.value}")
        bundle.to(dtype)
    else:
        bundle = init_params(scope, arch, c.generator_config(), c.discriminator_config(arch), c.seed)
        bundle.to(dtype)
    start_epoch = bundle.epoch + 1
    bundle.extra.setdefault("train_config", asdict(c))

    gen_names, disc_names = bundle.generator_names(), bundle.discriminator_names()
    betas = (c.adam_beta1, c.adam_beta2)
    opt_g = torch.optim.Adam(_params(bundle, gen_names), lr=c.lr, betas=betas)
    opt_d = torch.optim.Adam(_params(bundle, disc_names), lr=c.lr, betas=betas)
    if optim_state:
        opt_g.load_state_dict(optim_state["G"])
        opt_d.load_state_dict(optim_state["D"])

    trainlog = TrainLog(best_epoch=bundle.extra.get("best_epoch"),
                        best_val_mae=bundle.extra.get("best_val_mae"))
    csvlog = _CsvLog(out / "train_log.csv" if out else None, append=resume_from is not None)
    global_step = (start_epoch - 1) * steps_per_epoch

    def checkpoint(name: str) -> None:
        if out is not None:
            save_checkpoint(bundle, out / name, {"G": opt_g.state_dict(), "D": opt_d.state_dict()})

    try:
        for epoch in range(start_epoch, c.total_epochs + 1):
            lr = lr_at(epoch, c)
            for opt in (opt_g, opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            rng = np.random.default_rng([c.seed, epoch])
            sums = np.zeros(3)
            for _ in range(steps_per_epoch):
                global_step += 1
                if arch is Arch.PIX2PIX:
                    rec = _pix2pix_step(bundle, sampler, rng, c, opt_g, opt_d, dtype)
                else:
                    rec = _cyclegan_step(bundle, sampler, rng, c, opt_g, opt_d, dtype)
                loss_g, loss_d, l1, gn, gn_d = rec
                if not all(math.isfinite(v) for v in (loss_g, loss_d)):
                    raise TrainingError(f"non-finite loss at step {global_step} (epoch {epoch})")
                step = StepRecord(epoch, global_step, loss_g, loss_d, l1, lr, gn, gn_d)
                trainlog.steps.append(step)
                csvlog.write(step)
                sums += (loss_g, loss_d, l1)
            mean = sums / steps_per_epoch
            erec = EpochRecord(epoch, lr, *mean.tolist())
            bundle.epoch = epoch
            if val and (epoch % c.val_every == 0 or epoch == c.total_epochs):
                erec.val_mae = validation_mae(bundle, val, c)
                if trainlog.best_val_mae is None or erec.val_mae < trainlog.best_val_mae:
                    trainlog.best_val_mae, trainlog.best_epoch = erec.val_mae, epoch
                    bundle.extra.update(best_epoch=epoch, best_val_mae=erec.val_mae)
                    trainlog.best_state = {k: copy.deepcopy(n.state_dict()) for k, n in bundle.nets.items()}
                    checkpoint("best.ckpt")
                log.info("%s/%s epoch %d: loss_G %.4f l1 %.4f val_mae %.4f", scope_name(scope),
                         arch.value, epoch, erec.loss_G, erec.l1, erec.val_mae)
            trainlog.epochs.append(erec)
            csvlog.flush()
            if epoch % c.val_every == 0 or epoch == c.total_epochs:
                checkpoint("last.ckpt")
    finally:
        csvlog.close()
    checkpoint("final.ckpt")
    return bundle, trainlog


def _pix2pix_step(bundle, sampler, rng, c, opt_g, opt_d, dtype):
    g, d = bundle.nets["G"], bundle.nets["D"]
    g.train()
    d.train()
    x, y, _ = _augment(sampler.draw(rng), c, rng)
    xt, yt = _tensor(x, dtype), _tensor(y, dtype)
    fake = g(xt)

    opt_d.zero_grad(set_to_none=True)
    loss_d = pix2pix_d_loss(d, xt, yt, fake)
    if not torch.isfinite(loss_d):
        raise NumericError("non-finite discriminator loss")
    loss_d.backward()
    gn_d = _clip(d.parameters(), c.grad_clip_max_norm)
    opt_d.step()

    opt_g.zero_grad(set_to_none=True)
    for p in d.parameters():
        p.requires_grad_(False)
    out = pix2pix_g_loss(d, xt, yt, fake, c.lambda_l1)
    for p in d.parameters():
        p.requires_grad_(True)
    if not torch.isfinite(out["loss_G"]):
        raise NumericError("non-finite generator loss")
    out["loss_G"].backward()
    gn = _clip(g.parameters(), c.grad_clip_max_norm)
    opt_g.step()
    return (out["loss_G"].item(), loss_d.item(), out["l1_term"].item(), gn, gn_d)


def _cyclegan_step(bundle, sampler, rng, c, opt_g, opt_d, dtype):
    nets = bundle.nets
    for n in nets.values():
        n.train()
    # independent draws give unpaired CT and PET patches
    x, _, _ = _augment(sampler.draw(rng), c, rng)
    pair_y = sampler.draw(rng)
    y = pair_y.pet if not c.augment else augment_pair(
        pair_y.pet, None, None, rng, rotation_deg=c.rotation_deg, flip_prob=c.flip_prob,
        noise_sigma=0.0)[0]
    xt, yt = _tensor(x, dtype), _tensor(y, dtype)

    opt_g.zero_grad(set_to_none=True)
    for n in ("D_X", "D_Y"):
        for p in nets[n].parameters():
            p.requires_grad_(False)
    out = cyclegan_g_loss(nets["G"], nets["F"], nets["D_X"], nets["D_Y"], xt, yt, c.lambda_cycle)
    for n in ("D_X", "D_Y"):
        for p in nets[n].parameters():
            p.requires_grad_(True)
    if not torch.isfinite(out["loss_G"]):
        raise NumericError("non-finite generator loss")
    out["loss_G"].backward()
    gn = _clip(_params(bundle, ("G", "F")), c.grad_clip_max_norm)
    opt_g.step()

    opt_d.zero_grad(set_to_none=True)
    loss_d = (cyclegan_d_loss(nets["D_Y"], yt, out["fake_y"])
              + cyclegan_d_loss(nets["D_X"], xt, out["fake_x"]))
    if not torch.isfinite(loss_d):
        raise NumericError("non-finite discriminator loss")
    loss_d.backward()
    gn_d = _clip(_params(bundle, ("D_X", "D_Y")), c.grad_clip_max_norm)
    opt_d.step()
    return (out["loss_G"].item(), loss_d.item(), out["cycle_term"].item(), gn, gn_d)
