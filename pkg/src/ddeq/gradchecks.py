"""Finite-difference checks for every differentiable op and the inner objective."""

from __future__ import annotations

from typing import Callable

import torch

from . import autodiff as ad
from . import net
from .kernel import RIESZ, mmd_sq_masked
from .solver import Problem

PRESETS = ("tiny", "full")


def _well_separated(gen, shape, min_gap=0.05):
    """Random entries with pairwise gaps, so relu and max-pool stay away from kinks."""
    n = 1
    for s in shape:
        n *= s
    vals = torch.randperm(n, generator=gen).to(ad.DTYPE) * min_gap
    vals = vals - vals.mean()
    return vals.reshape(shape)


def op_cases(seed: int = 0) -> list[tuple[str, Callable, list]]:
    gen = torch.Generator().manual_seed(seed)

    def rn(*shape):
        return torch.randn(*shape, generator=gen, dtype=ad.DTYPE)

    mask = torch.tensor([True, True, False, True, True])
    w = rn(5)
    w54, w43, w34 = rn(5, 4), rn(4, 3), rn(3, 4)
    return [
        ("add", lambda a, b: (ad.add(a, b) * w[:3]).sum(), [rn(4, 3), rn(4, 3)]),
        ("subtract", lambda a, b: (ad.subtract(a, b) ** 2).sum(), [rn(4, 3), rn(4, 3)]),
        ("scale", lambda a: (ad.scale(a, 2.5) ** 2).sum(), [rn(3, 3)]),
        ("matmul", lambda a, b: (ad.matmul(a, b) ** 2).sum(), [rn(4, 5), rn(5, 3)]),
        ("contract", lambda z, a, x: ad.contract("il,ljn,n->ij", z, a, x).pow(2).sum(),
         [rn(3, 2), rn(2, 2, 2), rn(2)]),
        ("relu", lambda a: (ad.relu(a) * w[:4]).sum(), [_well_separated(gen, (6, 4)) + 0.0125]),
        ("exp", lambda a: ad.exp(a).sum(), [rn(3, 4)]),
        ("masked_softmax", lambda a: (ad.masked_softmax(a, mask) * w).sum(), [rn(2, 5)]),
        ("layer_norm", lambda x, g, b: (ad.layer_norm(x, g, b, mask) * w54).sum(),
         [rn(5, 4), rn(4), rn(4)]),
        ("masked_mean", lambda x: (ad.masked_mean(x, mask) ** 2).sum(), [rn(5, 3)]),
        ("masked_max_pool", lambda x: (ad.masked_max_pool(x, mask) * w[:3]).sum(),
         [_well_separated(gen, (5, 3))]),
        ("pairwise_distance", lambda x, y: (ad.pairwise_distance(x, y) * w43).sum(),
         [rn(4, 2), rn(3, 2)]),
        ("sum", lambda x: ad.total(x * x), [rn(3, 3)]),
        ("concat_split", lambda x: (ad.concat(list(ad.split(x, 2))[::-1]) ** 2 * w34).sum(),
         [rn(3, 4)]),
    ]


def _core_config(preset: str) -> net.ModelConfig:
    if preset == "tiny":
        return net.ModelConfig(data_dim=2, latent_dim=8, bilinear_dim=4, cross_encoder_layers=1,
                               num_classes=3, coupling=True)
    if preset == "full":
        return net.ModelConfig.full(data_dim=2, num_classes=3, coupling=True)
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")


def model_cases(preset: str = "tiny", seed: int = 0):
    cfg = _core_config(preset)
    params = net.init_params(cfg, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    Z = torch.randn(6, cfg.latent_dim, generator=gen, dtype=ad.DTYPE)
    X = torch.randn(5, cfg.data_dim, generator=gen, dtype=ad.DTYPE)

    def inner_objective(z):
        prob = Problem.build(z.unsqueeze(0), X.unsqueeze(0), params)
        return prob.objective(z.unsqueeze(0), RIESZ)[0]

    def coupling(z):
        return (net.coupling_forward(z, params) ** 2).sum()

    def head(z):
        return net.classify_head(z, params).pow(2).sum()

    def mmd(x, y):
        return mmd_sq_masked(RIESZ, x, None, y, None)

    return [
        ("inner_objective_G", inner_objective, [Z]),
        ("coupling_forward", coupling, [Z]),
        ("classify_head", head, [Z]),
        ("mmd_sq", mmd, [Z[:, :2].clone(), X.clone()]),
    ]


def run(preset: str = "tiny", seed: int = 0, tol: float = 1e-5, step: float = 1e-5):
    """List of (name, GradcheckReport) for all ops and model-level functions."""
    cases = op_cases(seed) + model_cases(preset, seed)
    return [(name, ad.gradcheck(f, inputs, tol=tol, step=step)) for name, f, inputs in cases]
