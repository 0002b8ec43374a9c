"""Kernels, squared MMD and closed-form Wasserstein gradients of MMD functionals.

The batched functions take point tensors of shape (..., N, d) with boolean
masks of shape (..., N); every active particle carries mass 1/N_active.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .errors import DimensionMismatch
from .measure import DiscreteMeasure

FAMILIES = ("riesz", "gaussian")


@dataclass(frozen=True)
class KernelSpec:
    family: str = "riesz"
    sigma: float = 1.0

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if fam == "gaussian" and not self.sigma > 0:
            raise ValueError("Gaussian kernel needs sigma > 0")


RIESZ = KernelSpec("riesz")


def _width(a) -> int:
    return a.shape[-1] if hasattr(a, "shape") else np.shape(a)[-1]


def _check_dims(a, b):
    if _width(a) != _width(b):
        raise DimensionMismatch(f"dimensions {_width(a)} and {_width(b)} differ")


def kernel_eval(k: KernelSpec, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _check_dims(x, y)
    d = x - y
    if k.family == "riesz":
        return -float(np.sqrt(d @ d))
    return float(np.exp(-(d @ d) / (2 * k.sigma**2)))


def kernel_grad1(k: KernelSpec, x, y) -> np.ndarray:
    """Gradient of ``k(x, y)`` in ``x``; the Riesz kernel uses 0 at ``x == y``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _check_dims(x, y)
    d = x - y
    if k.family == "riesz":
        n = np.sqrt(d @ d)
        return np.zeros_like(d) if n == 0 else -d / n
    return -d / k.sigma**2 * kernel_eval(k, x, y)


def gram(k: KernelSpec, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if k.family == "riesz":
        return -ad.pairwise_distance(x, y)
    return torch.exp(-ad.pairwise_sq_distance(x, y) / (2 * k.sigma**2))


def grad1_matrix(k: KernelSpec, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``[..., i, j, :] = grad_1 k(x_i, y_j)`` in closed form."""
    diff = x.unsqueeze(-2) - y.unsqueeze(-3)
    if k.family == "riesz":
        dist = ad.pairwise_distance(x, y)
        inv = torch.where(dist > 0, 1.0 / torch.where(dist > 0, dist, 1.0), 0.0)
        return -diff * inv.unsqueeze(-1)
    return -diff / k.sigma**2 * gram(k, x, y).unsqueeze(-1)


def weights(mask: torch.Tensor, dtype=ad.DTYPE) -> torch.Tensor:
    w = mask.to(dtype)
    return w / w.sum(-1, keepdim=True)


def _bilinear(u, K, v):
    return (u.unsqueeze(-1) * K * v.unsqueeze(-2)).sum((-2, -1))


def mmd_sq_masked(k: KernelSpec, x, xmask, y, ymask) -> torch.Tensor:
    """Squared MMD between masked clouds; returns shape ``x.shape[:-2]``.

    The cross term is symmetrized so that swapping the arguments gives a
    bit-identical result.
    """
    _check_dims(x, y)
    if xmask is None:
        xmask = torch.ones(x.shape[:-1], dtype=torch.bool)
    if ymask is None:
        ymask = torch.ones(y.shape[:-1], dtype=torch.bool)
    wx, wy = weights(xmask, x.dtype), weights(ymask, y.dtype)
    kxx = gram(k, x, x)
    kyy = gram(k, y, y)
    kxy = gram(k, x, y)
    kyx = kxy.transpose(-1, -2).contiguous()
    cross = 0.5 * (_bilinear(wx, kxy, wy) + _bilinear(wy, kyx, wx))
    return _bilinear(wx, kxx, wx) + _bilinear(wy, kyy, wy) - 2.0 * cross


def _as_tensors(m):
    if isinstance(m, DiscreteMeasure):
        return torch.as_tensor(m.points, dtype=ad.DTYPE), torch.as_tensor(m.mask)
    t = torch.as_tensor(np.ascontiguousarray(m, dtype=np.float64))
    if t.ndim == 1:
        t = t[:, None]
    return t, torch.ones(t.shape[:-1], dtype=torch.bool)


def mmd_sq(k: KernelSpec, mu, nu) -> float:
    x, xm = _as_tensors(mu)
    y, ym = _as_tensors(nu)
    _check_dims(x, y)
    with torch.no_grad():
        return float(mmd_sq_masked(k, x, xm, y, ym))


def witness_gradient(k: KernelSpec, at, mu, mu_mask, nu, nu_mask) -> torch.Tensor:
    """Gradient of the witness ``f = int k(., y) dmu - int k(., y) dnu`` at the rows of ``at``."""
    wmu = weights(mu_mask, mu.dtype)
    wnu = weights(nu_mask, nu.dtype)
    gmu = (grad1_matrix(k, at, mu) * wmu.unsqueeze(-2).unsqueeze(-1)).sum(-2)
    gnu = (grad1_matrix(k, at, nu) * wnu.unsqueeze(-2).unsqueeze(-1)).sum(-2)
    return gmu - gnu


def mmd_flow_gradient_masked(k: KernelSpec, x, xmask, y, ymask) -> torch.Tensor:
    """Wasserstein gradient of ``mu -> 1/2 MMD^2(mu, nu)`` for a fixed ``nu``."""
    g = witness_gradient(k, x, x, xmask, y, ymask)
    return ad.mask_rows(g, xmask)


def mmd_flow_gradient_fixed(k: KernelSpec, mu, nu) -> np.ndarray:
    x, xm = _as_tensors(mu)
    y, ym = _as_tensors(nu)
    _check_dims(x, y)
    with torch.no_grad():
        return mmd_flow_gradient_masked(k, x, xm, y, ym).numpy()


def wasserstein_gradient_pushforward_masked(
    k: KernelSpec, x: torch.Tensor, xmask, T: Callable, T_vjp: Callable
) -> torch.Tensor:
    """Closed-form Wasserstein gradient of ``mu -> 1/2 MMD^2(mu, T#mu)``.

    ``T`` maps particles to particles row-wise and ``T_vjp(x, v)`` returns
    ``grad T(x_i)^T v_i`` per row.
    """
    tx = T(x)
    g_at_x = witness_gradient(k, x, x, xmask, tx, xmask)
    g_at_tx = witness_gradient(k, tx, x, xmask, tx, xmask)
    out = g_at_x - T_vjp(x, g_at_tx)
    return ad.mask_rows(out, xmask)


def wasserstein_gradient_pushforward(k: KernelSpec, mu, T: Callable, T_vjp: Callable) -> np.ndarray:
    x, xm = _as_tensors(mu)
    return wasserstein_gradient_pushforward_masked(k, x, xm, T, T_vjp).detach().numpy()


def rotation_map(angle: float):
    """Rotation about the origin in 2-D as a (map, vector-Jacobian product) pair."""
    quarter = angle / (np.pi / 2)
    if abs(quarter - round(quarter)) < 1e-12:
        # whole quarter turns are exact, so 2*pi leaves points bit-identical
        c, s = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][round(quarter) % 4]
    else:
        c, s = np.cos(angle), np.sin(angle)
    R = torch.tensor([[c, -s], [s, c]], dtype=ad.DTYPE)

    def T(x):
        return x @ R.T

    def T_vjp(x, v):
        return v @ R

    return T, T_vjp


def l2_norm_sq(v: torch.Tensor, mask) -> torch.Tensor:
    """``||v||^2_{L^2(mu)}`` for a vector field sampled on the particles of ``mu``."""
    w = weights(mask, v.dtype)
    return (w * (v * v).sum(-1)).sum(-1)
