"""3D conditional GAN building blocks: U-Net generator, PatchGAN discriminator,
Pix2Pix and CycleGAN objectives, and a versioned checkpoint container.

Checkpoint layout (all integers little-endian)::

    bytes 0..7    magic  b"CT2PETCK"
    bytes 8..11   uint32 container version (currently 1)
    bytes 12..19  uint64 header length N
    bytes 20..    N bytes of UTF-8 JSON header
    then          tensor payloads, C order, little-endian, at the offsets
                  listed in header["tensors"] (relative to the payload start)
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume import DISTRICT_NAMES, WHOLE_BODY, ShapeError

CHECKPOINT_MAGIC = b"CT2PETCK"
CHECKPOINT_VERSION = 1
LAMBDA_L1 = 100.0
LAMBDA_CYCLE = 10.0


class Arch(str, enum.Enum):
    PIX2PIX = "pix2pix"
    CYCLEGAN = "cyclegan"


class CheckpointError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


def scope_name(scope: int) -> str:
    return "whole_body" if scope == WHOLE_BODY else DISTRICT_NAMES[scope]


def parse_scope(name: Union[str, int]) -> int:
    if isinstance(name, int) or str(name).isdigit():
        scope = int(name)
        if scope != WHOLE_BODY and scope not in DISTRICT_NAMES:
            raise ValueError(f"unknown scope {name!r}")
        return scope
    name = str(name).lower().replace("-", "_")
    if name in ("whole_body", "wholebody", "wb"):
        return WHOLE_BODY
    for i, n in DISTRICT_NAMES.items():
        if n == name:
            return i
    raise ValueError(f"unknown scope {name!r}")


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    depth: int = 3
    patch_size: int = 32

    def __post_init__(self):
        if self.depth < 1 or 2 ** self.depth > self.patch_size:
            raise ValueError(f"need 1 <= depth and 2**depth <= patch_size, got "
                             f"depth={self.depth}, patch_size={self.patch_size}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 2
    levels: int = 3
    base_channels: int = 16

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")


def _channels(base: int, level: int) -> int:
    return base * 2 ** min(level, 3)


class UNet3D(nn.Module):
    """Encoder-decoder with skip connections; sigmoid output in [0, 1]."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        # no normalization at full resolution: instance norm would discard the
        # absolute intensity level that the CT->PET map depends on
        self.stem = nn.Sequential(nn.Conv3d(cfg.in_channels, b, 3, padding=1), nn.LeakyReLU(0.2))
        self.down = nn.ModuleList()
        for k in range(cfg.depth):
            cin, cout = _channels(b, k), _channels(b, k + 1)
            innermost = k == cfg.depth - 1
            layers = [nn.Conv3d(cin, cout, 4, stride=2, padding=1)]
            if not innermost:  # the bottleneck may be 1 voxel wide
                layers.append(nn.InstanceNorm3d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            self.down.append(nn.Sequential(*layers))
        self.up = nn.ModuleList()
        for k in reversed(range(cfg.depth)):
            cin = _channels(b, k + 1) * (1 if k == cfg.depth - 1 else 2)
            cout = _channels(b, k)
            self.up.append(nn.Sequential(
                nn.ConvTranspose3d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm3d(cout, affine=True),
                nn.ReLU(),
            ))
        self.head = nn.Conv3d(2 * b, cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        skips = [x]
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips.pop()
        for layer in self.up:
            x = torch.cat([layer(x), skips.pop()], dim=1)
        return torch.sigmoid(self.head(x))


class PatchDiscriminator3D(nn.Module):
    """Emits a grid of real/fake logits, one per receptive-field patch."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        layers = [nn.Conv3d(cfg.in_channels, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        for k in range(1, cfg.levels):
            layers += [nn.Conv3d(_channels(b, k - 1), _channels(b, k), 4, stride=2, padding=1),
                       nn.InstanceNorm3d(_channels(b, k), affine=True), nn.LeakyReLU(0.2)]
        c = _channels(b, cfg.levels - 1)
        layers += [nn.Conv3d(c, 2 * c, 3, padding=1), nn.InstanceNorm3d(2 * c, affine=True),
                   nn.LeakyReLU(0.2), nn.Conv3d(2 * c, 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm3d) and m.affine:
            nn.init.normal_(m.weight, 1.0, 0.02, generator=gen)
            nn.init.zeros_(m.bias)


@dataclass(eq=False)
class ModelBundle:
    """Networks of one Pix2Pix (G, D) or CycleGAN (G, F, D_X, D_Y) model."""

    scope: int
    arch: Arch
    gen_config: GeneratorConfig
    disc_config: DiscriminatorConfig
    nets: Dict[str, nn.Module]
    seed: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def G(self) -> nn.Module:
        return self.nets["G"]

    @property
    def patch_size(self) -> int:
        return self.gen_config.patch_size

    def config_dict(self) -> dict:
        return {
            "arch": Arch(self.arch).value,
            "scope": int(self.scope),
            "generator": asdict(self.gen_config),
            "discriminator": asdict(self.disc_config),
        }

    def config_hash(self) -> str:
        return config_hash(self.config_dict())

    def generator_names(self) -> Tuple[str, ...]:
        return ("G",) if self.arch is Arch.PIX2PIX else ("G", "F")

    def discriminator_names(self) -> Tuple[str, ...]:
        return ("D",) if self.arch is Arch.PIX2PIX else ("D_X", "D_Y")

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for net in self.nets.values():
            net.to(dtype)
        return self

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.nets):
            for pname, t in sorted(self.nets[name].state_dict().items()):
                h.update(f"{name}.{pname}".encode())
                h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def init_params(scope: int, arch: Union[Arch, str] = Arch.PIX2PIX,
                gen_config: Optional[GeneratorConfig] = None,
                disc_config: Optional[DiscriminatorConfig] = None, seed: int = 0) -> ModelBundle:
    """Build a freshly initialized model; parameters depend only on ``seed``."""
    arch = Arch(arch)
    gen_config = gen_config or GeneratorConfig()
    if disc_config is None:
        disc_config = DiscriminatorConfig(in_channels=2 if arch is Arch.PIX2PIX else 1,
                                          base_channels=gen_config.base_channels)
    expected_in = 2 if arch is Arch.PIX2PIX else 1
    if disc_config.in_channels != expected_in:
        raise ValueError(f"{arch.value} discriminator needs {expected_in} input channels")
    gen = torch.Generator().manual_seed(int(seed))
    if arch is Arch.PIX2PIX:
        nets = {"G": UNet3D(gen_config), "D": PatchDiscriminator3D(disc_config)}
    else:
        nets = {"G": UNet3D(gen_config), "F": UNet3D(gen_config),
                "D_X": PatchDiscriminator3D(disc_config), "D_Y": PatchDiscriminator3D(disc_config)}
    for name in sorted(nets):
        _init_weights(nets[name], gen)
    return ModelBundle(int(scope), arch, gen_config, disc_config, nets, seed=int(seed))


def generator_forward(g: Union[ModelBundle, nn.Module], x: np.ndarray) -> np.ndarray:
    """Translate one s^3 CT patch into an s^3 PET patch."""
    net = g.G if isinstance(g, ModelBundle) else g
    s = net.cfg.patch_size
    x = np.asarray(x)
    if x.shape != (s, s, s):
        raise ShapeError(f"generator expects a {s}^3 patch, got {x.shape}")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        net.eval()
        out = net(torch.as_tensor(x, dtype=dtype)[None, None])
    return out[0, 0].float().numpy()


# --------------------------------------------------------------------------
# objectives

def bce_with_logits(logits: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    target = torch.ones_like(logits) if target_is_real else torch.zeros_like(logits)
    return F.binary_cross_entropy_with_logits(logits, target)


def lsgan(scores: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    return ((scores - (1.0 if target_is_real else 0.0)) ** 2).mean()


def _finite(losses: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    for name, value in losses.items():
        if name.startswith("loss") and not torch.isfinite(value).all():
            raise NumericError(f"non-finite {name}")
    return losses


def pix2pix_d_loss(d: nn.Module, x: torch.Tensor, y: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    real_logits = d(torch.cat([x, y], dim=1))
    fake_logits = d(torch.cat([x, fake.detach()], dim=1))
    return 0.5 * (bce_with_logits(real_logits, True) + bce_with_logits(fake_logits, False))


def pix2pix_g_loss(d: nn.Module, x: torch.Tensor, y: torch.Tensor, fake: torch.Tensor,
                   lambda_l1: float = LAMBDA_L1) -> Dict[str, torch.Tensor]:
    adv = bce_with_logits(d(torch.cat([x, fake], dim=1)), True)
    l1 = (fake - y).abs().mean()
    return {"loss_G": adv + lambda_l1 * l1, "adv_term": adv, "l1_term": l1}


def pix2pix_losses(g: nn.Module, d: nn.Module, x: torch.Tensor, y: torch.Tensor,
                   lambda_l1: float = LAMBDA_L1) -> Dict[str, torch.Tensor]:
    """Conditional GAN loss (BCE on patch logits) plus ``lambda_l1`` times L1."""
    fake = g(x)
    out = pix2pix_g_loss(d, x, y, fake, lambda_l1)
    out["loss_D"] = pix2pix_d_loss(d, x, y, fake)
    out["fake"] = fake
    return _finite(out)


def cyclegan_g_loss(g, f, d_x, d_y, x, y, lambda_cycle: float = LAMBDA_CYCLE,
                    lambda_identity: float = 0.0) -> Dict[str, torch.Tensor]:
    fake_y, fake_x = g(x), f(y)
    adv_g = lsgan(d_y(fake_y), True)
    adv_f = lsgan(d_x(fake_x), True)
    cycle = (f(fake_y) - x).abs().mean() + (g(fake_x) - y).abs().mean()
    loss = adv_g + adv_f + lambda_cycle * cycle
    out = {"adv_term": adv_g + adv_f, "cycle_term": cycle, "fake_y": fake_y, "fake_x": fake_x}
    if lambda_identity:
        ident = (g(y) - y).abs().mean() + (f(x) - x).abs().mean()
        loss = loss + lambda_identity * lambda_cycle * ident
        out["identity_term"] = ident
    out["loss_G"] = loss
    return out


def cyclegan_d_loss(d: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * (lsgan(d(real), True) + lsgan(d(fake.detach()), False))


def cyclegan_losses(g, f, d_x, d_y, x, y, lambda_cycle: float = LAMBDA_CYCLE,
                    lambda_identity: float = 0.0) -> Dict[str, torch.Tensor]:
    """Least-squares adversarial terms both ways plus weighted cycle consistency."""
    out = cyclegan_g_loss(g, f, d_x, d_y, x, y, lambda_cycle, lambda_identity)
    out["loss_D_Y"] = cyclegan_d_loss(d_y, y, out["fake_y"])
    out["loss_D_X"] = cyclegan_d_loss(d_x, x, out["fake_x"])
    out["loss_D"] = out["loss_D_X"] + out["loss_D_Y"]
    return _finite(out)


# --------------------------------------------------------------------------
# checkpoints

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def _flatten_optimizer(prefix: str, opt_state: dict, tensors: Dict[str, torch.Tensor]) -> dict:
    meta = {"param_groups": opt_state["param_groups"], "state": {}}
    for idx, st in opt_state["state"].items():
        entry = {}
        for k, v in st.items():
            if torch.is_tensor(v):
                name = f"{prefix}/state/{idx}/{k}"
                tensors[name] = v
                entry[k] = {"tensor": name}
            else:
                entry[k] = v
        meta["state"][str(idx)] = entry
    return meta


def _unflatten_optimizer(meta: dict, tensors: Dict[str, torch.Tensor]) -> dict:
    state = {}
    for idx, entry in meta["state"].items():
        state[int(idx)] = {k: tensors[v["tensor"]] if isinstance(v, dict) and "tensor" in v else v
                           for k, v in entry.items()}
    groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else g for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def save_checkpoint(bundle: ModelBundle, path: Union[str, os.PathLike],
                    optimizers: Optional[Dict[str, dict]] = None) -> Path:
    """Write networks (and optional optimizer state dicts) to one container file."""
    tensors: Dict[str, torch.Tensor] = {}
    for name in sorted(bundle.nets):
        for pname, t in bundle.nets[name].state_dict().items():
            tensors[f"{name}.{pname}"] = t
    opt_meta = {}
    for name, st in sorted((optimizers or {}).items()):
        opt_meta[name] = _flatten_optimizer(f"optim/{name}", st, tensors)
    table, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    cfg = bundle.config_dict()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "epoch": int(bundle.epoch),
        "seed": int(bundle.seed),
        "extra": bundle.extra,
        "optimizers": opt_meta,
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_checkpoint_header(path: Union[str, os.PathLike]) -> Tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, 20 + n


def load_checkpoint(path: Union[str, os.PathLike], expected_hash: Optional[str] = None
                    ) -> Tuple[ModelBundle, Dict[str, dict]]:
    """Read a checkpoint; returns the model and any stored optimizer state dicts."""
    header, start = read_checkpoint_header(path)
    cfg = header["config"]
    actual = config_hash(cfg)
    if header.get("config_hash") != actual:
        raise CheckpointError(f"{path}: config hash {header.get('config_hash')!r} does not match "
                              f"the stored config ({actual})")
    if expected_hash is not None and expected_hash != actual:
        raise CheckpointError(f"{path}: config hash {actual} differs from expected {expected_hash}")
    bundle = init_params(cfg["scope"], cfg["arch"], GeneratorConfig(**cfg["generator"]),
                         DiscriminatorConfig(**cfg["discriminator"]), seed=header["seed"])
    bundle.epoch = int(header["epoch"])
    bundle.extra = header.get("extra", {})
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    for name, net in bundle.nets.items():
        sd = {k[len(name) + 1:]: v for k, v in tensors.items() if k.startswith(name + ".")}
        try:
            net.load_state_dict(sd, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: parameters do not fit {name}: {exc}") from None
        net.to(next(iter(sd.values())).dtype)
    optimizers = {name: _unflatten_optimizer(meta, tensors)
                  for name, meta in header.get("optimizers", {}).items()}
    return bundle, optimizers

