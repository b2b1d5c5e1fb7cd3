"""Central finite-difference check of the Pix2Pix generator loss.

The generator is piecewise linear (ReLU / LeakyReLU), so a finite difference is
only meaningful when the +-h stencil stays on one linear piece. Every rectifier
input is recorded at +h and -h and parameters whose stencil flips any sign are
skipped and replaced by the next draw.
"""

import numpy as np
import torch
from torch import nn

from ct2pet.models import DiscriminatorConfig, GeneratorConfig, init_params, pix2pix_g_loss

FD_STEP = 1e-3


def _sign_recorder(nets):
    signs = []

    def hook(_module, inputs, _output):
        signs.append(inputs[0].detach() > 0)

    handles = [m.register_forward_hook(hook) for net in nets for m in net.modules()
               if isinstance(m, (nn.ReLU, nn.LeakyReLU))]
    return signs, handles


def generator_gradcheck(n_params=64, seed=0, max_draws=5000):
    """Returns (numeric, analytic, draws) for ``n_params`` generator parameters."""
    b = init_params(1, "pix2pix", GeneratorConfig(base_channels=4, depth=3, patch_size=16),
                    DiscriminatorConfig(in_channels=2, base_channels=4, levels=2), seed=seed)
    b.to(torch.float64)
    g, d = b.nets["G"], b.nets["D"]
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.random((1, 1, 16, 16, 16)))
    # a zero target keeps |fake - y| away from its kink since fake > 0
    y = torch.zeros((1, 1, 16, 16, 16), dtype=torch.float64)

    def loss():
        return pix2pix_g_loss(d, x, y, g(x), 100.0)["loss_G"]

    params = list(g.parameters())
    grads = torch.autograd.grad(loss(), params)
    flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    order = rng.permutation(len(flat))[:max_draws]
    signs, handles = _sign_recorder([g, d])
    numerics, analytics, draws = [], [], 0
    try:
        with torch.no_grad():
            for k in order:
                if len(numerics) == n_params:
                    break
                draws += 1
                i, j = flat[k]
                p = params[i].view(-1)
                old = p[j].item()
                signs.clear()
                p[j] = old + FD_STEP
                up = loss().item()
                p[j] = old - FD_STEP
                down = loss().item()
                p[j] = old
                half = len(signs) // 2
                if not all(torch.equal(a, c) for a, c in zip(signs[:half], signs[half:])):
                    continue
                numerics.append((up - down) / (2 * FD_STEP))
                analytics.append(grads[i].view(-1)[j].item())
    finally:
        for h in handles:
            h.remove()
    return np.asarray(numerics), np.asarray(analytics), draws


def relative_errors(numeric, analytic):
    return np.abs(numeric - analytic) / np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-12)
