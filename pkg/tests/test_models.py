import math

import numpy as np
import pytest
import torch

from ct2pet.models import (
    Arch,
    CheckpointError,
    DiscriminatorConfig,
    GeneratorConfig,
    ShapeError,
    bce_with_logits,
    cyclegan_losses,
    generator_forward,
    init_params,
    load_checkpoint,
    lsgan,
    parse_scope,
    pix2pix_losses,
    save_checkpoint,
    scope_name,
)
from ct2pet.volume import WHOLE_BODY

from gradcheck import generator_gradcheck, relative_errors

TINY = GeneratorConfig(base_channels=4, depth=2, patch_size=16)


def tiny(arch="pix2pix", seed=0):
    return init_params(2, arch, TINY, None, seed)


@pytest.mark.parametrize("depth,s", [(2, 16), (3, 16), (2, 32), (3, 32)])
def test_generator_shape(depth, s):
    b = init_params(1, "pix2pix", GeneratorConfig(base_channels=4, depth=depth, patch_size=s), None, 0)
    out = generator_forward(b, np.zeros((s, s, s), np.float32))
    assert out.shape == (s, s, s)
    assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_generator_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        generator_forward(tiny(), np.zeros((16, 16, 15), np.float32))


def test_config_invariants():
    with pytest.raises(ValueError):
        GeneratorConfig(depth=6, patch_size=32)


def test_forward_deterministic():
    b = tiny()
    x = np.random.default_rng(0).random((16, 16, 16)).astype(np.float32)
    assert np.array_equal(generator_forward(b, x), generator_forward(b, x))


def test_init_deterministic():
    assert tiny(seed=3).param_checksum() == tiny(seed=3).param_checksum()
    assert tiny(seed=3).param_checksum() != tiny(seed=4).param_checksum()


def test_bce_at_half():
    assert bce_with_logits(torch.zeros(5, 5), True).item() == pytest.approx(math.log(2))
    assert bce_with_logits(torch.zeros(5, 5), False).item() == pytest.approx(math.log(2))


def test_pix2pix_terms():
    b = tiny()
    g, d = b.nets["G"], b.nets["D"]
    x = torch.rand(1, 1, 16, 16, 16)
    with torch.no_grad():
        y = g(x)
    out = pix2pix_losses(g, d, x, y)
    assert out["l1_term"].item() == 0.0
    assert out["loss_G"].item() == pytest.approx(out["adv_term"].item())
    y2 = y + 0.1
    l1 = pix2pix_losses(g, d, x, y2)["l1_term"].item()
    l1_double = pix2pix_losses(g, d, x, y + 0.2)["l1_term"].item()
    assert l1_double == pytest.approx(2 * l1, rel=1e-5)
    for k in ("adv_term", "loss_D", "l1_term"):
        assert out[k].item() >= 0


def test_cyclegan_terms():
    b = tiny("cyclegan")
    n = b.nets
    x = torch.rand(1, 1, 16, 16, 16)
    y = torch.rand(1, 1, 16, 16, 16)
    out = cyclegan_losses(n["G"], n["F"], n["D_X"], n["D_Y"], x, y)
    assert out["cycle_term"].item() > 0
    assert out["loss_G"].item() == pytest.approx(out["adv_term"].item() + 10 * out["cycle_term"].item(),
                                                 rel=1e-5)
    assert lsgan(torch.ones(3, 3), True).item() == 0.0
    assert 10 * 0.02 == pytest.approx(0.2)


def test_cycle_term_zero_for_exact_inverse():
    ident = torch.nn.Identity()
    d = lambda t: torch.ones_like(t)  # noqa: E731
    x = torch.rand(1, 1, 4, 4, 4)
    y = torch.rand(1, 1, 4, 4, 4)
    out = cyclegan_losses(ident, ident, d, d, x, y)
    assert out["cycle_term"].item() == 0.0
    assert out["adv_term"].item() == 0.0


def test_cycle_weight():
    shift = lambda t: t + 0.01  # noqa: E731
    d = lambda t: torch.ones_like(t)  # noqa: E731
    x = torch.rand(1, 1, 4, 4, 4, dtype=torch.float64)
    y = torch.rand(1, 1, 4, 4, 4, dtype=torch.float64)
    out = cyclegan_losses(shift, shift, d, d, x, y)
    # F(G(x)) - x = 0.02 and G(F(y)) - y = 0.02
    assert out["cycle_term"].item() == pytest.approx(0.04)
    assert out["loss_G"].item() == pytest.approx(10 * 0.04)


def test_nonfinite_loss_raises():
    from ct2pet.models import NumericError
    b = tiny()
    x = torch.full((1, 1, 16, 16, 16), float("nan"))
    with pytest.raises(NumericError):
        pix2pix_losses(b.nets["G"], b.nets["D"], x, x)


@pytest.mark.parametrize("arch", ["pix2pix", "cyclegan"])
def test_checkpoint_roundtrip(tmp_path, arch):
    b = tiny(arch, seed=9)
    b.epoch = 7
    opt = torch.optim.Adam(b.G.parameters(), lr=1e-3)
    b.G(torch.rand(1, 1, 16, 16, 16)).mean().backward()
    opt.step()
    path = save_checkpoint(b, tmp_path / "m.ckpt", {"G": opt.state_dict()})
    back, optim = load_checkpoint(path, expected_hash=b.config_hash())
    assert back.param_checksum() == b.param_checksum()
    assert back.epoch == 7 and back.arch is Arch(arch) and back.seed == 9
    probe = np.random.default_rng(0).random((16, 16, 16)).astype(np.float32)
    assert np.array_equal(generator_forward(back, probe), generator_forward(b, probe))
    opt2 = torch.optim.Adam(back.G.parameters(), lr=1e-3)
    opt2.load_state_dict(optim["G"])
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    assert all(torch.equal(s1[k]["exp_avg"], s2[k]["exp_avg"]) for k in s1)


def test_checkpoint_hash_mismatch(tmp_path):
    path = save_checkpoint(tiny(), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_hash="0" * 16)
    raw = bytearray(path.read_bytes())
    i = raw.find(b'"base_channels": 4')
    raw[i:i + 18] = b'"base_channels": 5'
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = save_checkpoint(tiny(), tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_scope_names():
    assert scope_name(WHOLE_BODY) == "whole_body" and scope_name(2) == "trunk"
    assert parse_scope("legs") == 4 and parse_scope("whole_body") == WHOLE_BODY
    with pytest.raises(ValueError):
        parse_scope("tail")


def test_discriminator_emits_grid():
    b = init_params(1, "pix2pix", GeneratorConfig(base_channels=4), DiscriminatorConfig(base_channels=4), 0)
    out = b.nets["D"](torch.rand(1, 2, 32, 32, 32))
    assert out.dim() == 5 and out.shape[1] == 1 and min(out.shape[2:]) > 1


def test_gradient_check():
    numeric, analytic, _ = generator_gradcheck(64)
    assert len(numeric) == 64
    assert relative_errors(numeric, analytic).max() <= 1e-3
