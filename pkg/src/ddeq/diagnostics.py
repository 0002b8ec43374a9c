"""Exact discrete optimal transport and runtime convergence monitors.

The monitors track three quantities along training:

* ``pl_ratio``: F(mu) / ||grad_W F(mu)||^2 for F(mu) = 1/2 MMD^2(mu, mu*), a
  Polyak-Lojasiewicz constant estimate averaged over random mu;
* ``grad_discrepancy_ratio``: how far the inner-flow gradient is from the
  gradient of the idealized objective, divided by eps_t;
* ``theorem_ratio``: cumulated squared outer gradient norms divided by
  sqrt(T) (log T)^2, which stays bounded when training converges at that rate.
"""

from __future__ import annotations

import math
from typing import Sequence

import networkx as nx
import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .errors import AllTermsSkipped, DimensionMismatch, UnsupportedScale
from .kernel import RIESZ, KernelSpec, l2_norm_sq, mmd_flow_gradient_masked, mmd_sq_masked
from .measure import DiscreteMeasure, as_rng

MAX_FLOW_SIZE = 10**6
GRAD_FLOOR = 1e-12
# integer cost scale for the min-cost-flow path; the optimal plan is read back
# and re-costed in floating point, so this only affects tie-breaking
_COST_SCALE = 10**12


def _points(m) -> np.ndarray:
    if isinstance(m, DiscreteMeasure):
        return m.active_points()
    a = np.asarray(m, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _canonical(x, y):
    # a fixed argument order makes the floating-point result exactly symmetric
    if (len(x), x.tobytes()) > (len(y), y.tobytes()):
        return y, x
    return x, y


def w2_distance(mu, nu) -> float:
    """Exact 2-Wasserstein distance between uniform discrete measures."""
    x, y = _points(mu), _points(nu)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"dimensions {x.shape[1]} and {y.shape[1]} differ")
    x, y = _canonical(np.ascontiguousarray(x), np.ascontiguousarray(y))
    n, m = len(x), len(y)
    cost = cdist(x, y, "sqeuclidean")
    if n == m:
        r, c = linear_sum_assignment(cost)
        return math.sqrt(max(cost[r, c].sum() / n, 0.0))
    return math.sqrt(max(_transport_cost(cost), 0.0))


def w2_distance_flow(mu, nu) -> float:
    """Transportation-problem path, usable for any counts (including equal ones)."""
    x, y = _points(mu), _points(nu)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"dimensions {x.shape[1]} and {y.shape[1]} differ")
    return math.sqrt(max(_transport_cost(cdist(x, y, "sqeuclidean")), 0.0))


def _transport_cost(cost: np.ndarray) -> float:
    n, m = cost.shape
    L = math.lcm(n, m)
    if L * (n + m) > MAX_FLOW_SIZE:
        raise UnsupportedScale(f"lcm({n},{m})*(n+m) = {L * (n + m)} exceeds {MAX_FLOW_SIZE}")
    a, b = L // n, L // m
    top = cost.max() if cost.size else 0.0
    scale = _COST_SCALE / top if top > 0 else 1.0
    G = nx.DiGraph()
    for i in range(n):
        G.add_node(("s", i), demand=-a)
    for j in range(m):
        G.add_node(("t", j), demand=b)
    for i in range(n):
        for j in range(m):
            G.add_edge(("s", i), ("t", j), weight=int(round(cost[i, j] * scale)), capacity=min(a, b))
    flow = nx.min_cost_flow(G)
    total = 0.0
    for i in range(n):
        for (_, j), f in flow[("s", i)].items():
            if f:
                total += f * cost[i, j]
    return total / L


# --- monitors -----------------------------------------------------------------------------


def eps_t(t: int) -> float:
    if t < 1:
        raise ValueError("time index starts at 1")
    return min(1.0, t**-0.5)


def _as_pts(a):
    if isinstance(a, DiscreteMeasure):
        return torch.as_tensor(a.points, dtype=ad.DTYPE), torch.as_tensor(a.mask)
    t = torch.as_tensor(np.asarray(a), dtype=ad.DTYPE)
    return t, torch.ones(t.shape[:-1], dtype=torch.bool)


def pl_ratio_masked(mu_star, mask, n_random=8, rng=None, kernel: KernelSpec = RIESZ) -> float:
    """Mean PL ratio over ``n_random`` standard-normal clouds shaped like ``mu_star``.

    ``mu_star`` may be batched (B, N, p); the mean then runs over all
    (sample, draw) pairs that survive the zero-gradient guard.
    """
    rng = as_rng(rng)
    terms = []
    for _ in range(n_random):
        mu = torch.as_tensor(rng.standard_normal(tuple(mu_star.shape)), dtype=ad.DTYPE)
        mu = ad.mask_rows(mu, mask)
        with torch.no_grad():
            F = 0.5 * mmd_sq_masked(kernel, mu, mask, mu_star, mask)
            g = mmd_flow_gradient_masked(kernel, mu, mask, mu_star, mask)
            gn = l2_norm_sq(g, mask)
        F, gn = np.atleast_1d(F.numpy()), np.atleast_1d(gn.numpy())
        ok = gn >= GRAD_FLOOR
        terms.extend((F[ok] / gn[ok]).tolist())
    if not terms:
        raise AllTermsSkipped("every random draw had a vanishing gradient")
    return float(np.mean(terms))


def pl_ratio(params, X, mu_star, n_random: int = 8, rng=None, kernel: KernelSpec = RIESZ) -> float:
    """PL constant estimate around ``mu_star``; ``params`` and ``X`` identify the fixed point."""
    z, mask = _as_pts(mu_star)
    return pl_ratio_masked(z, mask, n_random, rng, kernel)


def grad_discrepancy_masked(prob, mu_t, mu_star, t: int, kernel: KernelSpec = RIESZ):
    """Per-sample discrepancy ratio for a solver ``Problem`` (batched)."""
    g_flow, _ = prob.direction(mu_t, kernel, rescale=True)
    with torch.no_grad():
        g_ideal = ad.mask_rows(
            mmd_flow_gradient_masked(kernel, mu_t, prob.zmask, mu_star, prob.zmask), prob.free
        )
        diff = g_flow.detach() - g_ideal
        num = l2_norm_sq(diff, prob.zmask)
    return num.numpy() / eps_t(t)


def grad_discrepancy_ratio(params, X, mu_t, mu_star, t: int, kernel: KernelSpec = RIESZ,
                           xmask=None, pin_mask=None) -> float:
    """||grad_W G(mu_t) - grad_W F_{mu*}(mu_t)||^2 / eps_t for a single sample."""
    from .solver import Problem

    z, zmask = _as_pts(mu_t)
    zs, _ = _as_pts(mu_star)
    Xt = torch.as_tensor(np.asarray(X), dtype=ad.DTYPE)
    xm = None if xmask is None else torch.as_tensor(xmask).unsqueeze(0)
    pm = None if pin_mask is None else torch.as_tensor(pin_mask).unsqueeze(0)
    prob = Problem.build(z.unsqueeze(0), Xt.unsqueeze(0), params, zmask.unsqueeze(0), xm, pm)
    return float(grad_discrepancy_masked(prob, z.unsqueeze(0), zs.unsqueeze(0), t, kernel)[0])


def theorem_ratio(sq_grad_norms: Sequence[float], T: int | None = None) -> float:
    """sum_{t<=T} ||grad L(theta_t)||^2 / (sqrt(T) (log T)^2)."""
    s = np.asarray(sq_grad_norms, dtype=np.float64)
    T = len(s) if T is None else int(T)
    if T < 2:
        raise ValueError("theorem_ratio needs T >= 2")
    return float(s[:T].sum() / (math.sqrt(T) * math.log(T) ** 2))


def monitor_row(params, batch, Zstar, t: int, sq_norms, cfg, rng) -> dict:
    """One diagnostics row at outer step ``t`` using mu_t = mu* (batch means)."""
    from .solver import Problem

    kernel = cfg.flow.kernel
    prob = Problem.build(Zstar, batch.X, params, batch.zmask, batch.xmask, batch.pin)
    pl = pl_ratio_masked(Zstar.detach(), batch.zmask, 8, rng, kernel)
    gd = grad_discrepancy_masked(prob, Zstar.detach(), Zstar.detach(), t, kernel)
    th = theorem_ratio(sq_norms)
    return {"t": t, "eps_t": eps_t(t), "pl_ratio": pl,
            "grad_discrepancy_ratio": float(np.mean(gd)), "theorem_ratio": th}
