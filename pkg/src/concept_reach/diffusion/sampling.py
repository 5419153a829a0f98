"""Ancestral DDPM sampling with optional steering interventions."""

from __future__ import annotations

import torch

from .model import DiffusionModel
from .train import from_model_space


def _posterior_coefficients(model: DiffusionModel):
    betas = torch.as_tensor(model.schedule.betas, dtype=torch.float64)
    ab = torch.as_tensor(model.schedule.alphas_bar, dtype=torch.float64)
    ab_prev = torch.cat([torch.ones(1, dtype=torch.float64), ab[:-1]])
    coef_x0 = ab_prev.sqrt() * betas / (1 - ab)
    coef_xt = (1 - betas).sqrt() * (1 - ab_prev) / (1 - ab)
    var = betas * (1 - ab_prev) / (1 - ab)
    return ab, coef_x0, coef_xt, var


@torch.no_grad()
def sample(model: DiffusionModel, y: str, n: int, seed: int, intervention=None, batch_size: int = 100, return_tensor: bool = False):
    """Draw ``n`` images for prompt ``y`` with all ``T`` ancestral steps.

    Each step predicts ``x0`` from the noise estimate, clips it to [-1, 1] and
    takes the posterior mean plus fixed-small variance noise. ``intervention``
    is a steering vector applied at every step. All random draws come from one
    generator seeded with ``seed`` and are made for the whole batch, so results
    do not depend on ``batch_size``.
    """
    from ..steering import Space

    dtype = next(model.denoiser.parameters()).dtype
    enc = model.encode([y])[0]
    v_h = None
    if intervention is not None:
        intervention.check_compatible(model)
        values = intervention.values.to(dtype)
        if intervention.space is Space.PROMPT:
            enc = enc + values
        else:
            v_h = values
    ab, coef_x0, coef_xt, var = (c.to(dtype) for c in _posterior_coefficients(model))

    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((n, 3, model.arch.sample_size, model.arch.sample_size), generator=gen, dtype=dtype)
    model.denoiser.eval()
    for t in range(model.schedule.T, 0, -1):
        i = t - 1
        eps = torch.cat(
            [
                model.eps(x[s : s + batch_size], t, enc.expand(len(x[s : s + batch_size]), *enc.shape), v_h=v_h)
                for s in range(0, n, batch_size)
            ]
        )
        x0 = ((x - (1 - ab[i]).sqrt() * eps) / ab[i].sqrt()).clamp(-1, 1)
        mean = coef_x0[i] * x0 + coef_xt[i] * x
        if t > 1:
            x = mean + var[i].sqrt() * torch.randn(x.shape, generator=gen, dtype=dtype)
        else:
            x = mean
    return x if return_tensor else from_model_space(x)
