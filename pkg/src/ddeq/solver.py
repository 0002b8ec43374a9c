"""Inner loop: Wasserstein gradient descent on G(Z) = 1/2 MMD^2(mu_Z, F_theta(mu_Z, rho)).

Each step moves every free particle by ``-eta_k * N_active * dG/dZ``; the
factor N_active turns the autodiff gradient (mass 1/N per particle) into the
per-particle Wasserstein gradient. Pinned and padded rows never move.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from . import net
from .errors import NonFiniteGradient
from .kernel import (
    RIESZ,
    KernelSpec,
    mmd_flow_gradient_masked,
    mmd_sq_masked,
    wasserstein_gradient_pushforward_masked,
)
from .measure import DiscreteMeasure, save_measure_csv

SOLVERS = ("wgd", "fixed-point-iteration")


@dataclass
class FlowConfig:
    iterations: int = 200
    step_size: float = 5.0
    step_decay: float = 1.0
    rescale_by_n: bool = True
    record_every: int = 1
    solver_kind: str = "wgd"
    kernel: KernelSpec = field(default_factory=lambda: RIESZ)
    tolerance: float = 0.0  # residual early stop; 0 disables
    snapshot_at: tuple = ()

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.solver_kind not in SOLVERS:
            raise ValueError(f"solver_kind must be one of {SOLVERS}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    def eta(self, step_index: int) -> float:
        return self.step_size * self.step_decay**step_index


@dataclass
class FlowTrace:
    steps: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    def record(self, step, objective, residual):
        self.steps.append(int(step))
        self.objective.append(objective)
        self.residual.append(residual)

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "objective", "residual"])
            for s, o, r in zip(self.steps, self.objective, self.residual):
                w.writerow([s, repr(float(np.mean(o))), repr(float(np.mean(r)))])

    def save_snapshots(self, directory, prefix="snapshot") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for step, pts in sorted(self.snapshots.items()):
            p = directory / f"{prefix}_{step:05d}.csv"
            save_measure_csv(pts, p)
            paths.append(p)
        return paths


@dataclass
class Problem:
    """A batched inner problem with the latent-independent features cached."""

    X: torch.Tensor
    params: net.ModelParams
    zmask: torch.Tensor
    xmask: torch.Tensor
    pin: torch.Tensor
    feats: tuple

    @classmethod
    def build(cls, Z, X, params, zmask=None, xmask=None, pin_mask=None, features_grad=False):
        B, N = Z.shape[:2]
        zmask = torch.ones(B, N, dtype=torch.bool) if zmask is None else zmask.bool()
        xmask = torch.ones(X.shape[:2], dtype=torch.bool) if xmask is None else xmask.bool()
        pin = torch.zeros(B, N, dtype=torch.bool) if pin_mask is None else pin_mask.bool()
        with torch.set_grad_enabled(features_grad):
            feats = net.encode_source(X, params, xmask)
        return cls(X, params, zmask, xmask, pin, feats)

    @property
    def free(self) -> torch.Tensor:
        return self.zmask & ~self.pin

    def F(self, Z):
        return net.core_from_features(Z, self.feats, self.params, self.zmask, self.xmask, self.pin)

    def objective(self, Z, kernel: KernelSpec):
        """Per-sample G(Z) = 1/2 MMD^2(mu_Z, F(mu_Z)), shape (B,)."""
        return 0.5 * mmd_sq_masked(kernel, Z, self.zmask, self.F(Z), self.zmask)

    def direction(self, Z, kernel: KernelSpec, rescale=True, create_graph=False):
        """Masked (rescaled) autodiff gradient of G and the per-sample objective."""
        if not Z.requires_grad:
            Z = Z.detach().requires_grad_(True)
        with torch.enable_grad():
            G = self.objective(Z, kernel)
            (g,) = ad.grad(G.sum(), [Z], create_graph=create_graph)
        if rescale:
            n = self.zmask.sum(-1).to(g.dtype)
            g = g * n[:, None, None]
        return ad.mask_rows(g, self.free), G


def _as_batch(Z, X, zmask, xmask, pin_mask):
    squeeze = Z.dim() == 2
    if squeeze:
        Z, X = Z.unsqueeze(0), X.unsqueeze(0)
        zmask = None if zmask is None else zmask.unsqueeze(0)
        xmask = None if xmask is None else xmask.unsqueeze(0)
        pin_mask = None if pin_mask is None else pin_mask.unsqueeze(0)
    return squeeze, Z, X, zmask, xmask, pin_mask


def _step(prob: Problem, Z, cfg: FlowConfig, step_index: int):
    g, G = prob.direction(Z, cfg.kernel, cfg.rescale_by_n)
    if not torch.isfinite(g).all():
        raise NonFiniteGradient("non-finite gradient in inner flow", step_index)
    return (Z - cfg.eta(step_index) * g).detach(), G.detach()


def wgf_step(Z, X, params, cfg: FlowConfig, step_index: int = 0, zmask=None, xmask=None,
             pin_mask=None):
    """One Wasserstein gradient descent step on the inner objective."""
    squeeze, Z, X, zmask, xmask, pin_mask = _as_batch(Z, X, zmask, xmask, pin_mask)
    prob = Problem.build(Z, X, params, zmask, xmask, pin_mask)
    out, _ = _step(prob, Z.detach(), cfg, step_index)
    return out.squeeze(0) if squeeze else out


def residual(Z, X, params, kernel: KernelSpec = RIESZ, zmask=None, xmask=None, pin_mask=None):
    """1/2 MMD^2(mu_Z, F(mu_Z)); a float for single inputs, an array for batches."""
    squeeze, Z, X, zmask, xmask, pin_mask = _as_batch(Z, X, zmask, xmask, pin_mask)
    with torch.no_grad():
        prob = Problem.build(Z, X, params, zmask, xmask, pin_mask)
        G = prob.objective(Z, kernel)
    return float(G[0]) if squeeze else G.numpy()


def solve_problem(prob: Problem, Z0, cfg: FlowConfig):
    Z = Z0.detach().clone()
    trace = FlowTrace()
    snap = set(cfg.snapshot_at)
    for step in range(cfg.iterations):
        if step in snap:
            trace.snapshots[step] = Z.numpy().copy()
        if cfg.solver_kind == "wgd":
            Znew, G = _step(prob, Z, cfg, step)
        else:
            with torch.no_grad():
                G = prob.objective(Z, cfg.kernel)
                Znew = prob.F(Z)
            if not torch.isfinite(Znew).all():
                raise NonFiniteGradient("non-finite iterate in fixed-point iteration", step)
        if step % cfg.record_every == 0:
            g = G.numpy().copy()
            trace.record(step, g, g)
        Z = Znew
        if cfg.tolerance > 0 and float(G.max()) < cfg.tolerance:
            break
    if cfg.iterations > 0:
        with torch.no_grad():
            G = prob.objective(Z, cfg.kernel).numpy().copy()
        last = trace.steps[-1] if trace.steps else -1
        final_step = step + 1
        if final_step != last:
            trace.record(final_step, G, G)
        if final_step in snap:
            trace.snapshots[final_step] = Z.numpy().copy()
    return Z, trace


def solve(Z0, X, params, cfg: FlowConfig, zmask=None, xmask=None, pin_mask=None):
    """Run ``cfg.iterations`` inner steps from ``Z0``; returns (Zstar, FlowTrace)."""
    squeeze, Z0, X, zmask, xmask, pin_mask = _as_batch(Z0, X, zmask, xmask, pin_mask)
    prob = Problem.build(Z0, X, params, zmask, xmask, pin_mask)
    Z, trace = solve_problem(prob, Z0, cfg)
    if squeeze:
        Z = Z.squeeze(0)
        trace.objective = [float(o[0]) for o in trace.objective]
        trace.residual = [float(r[0]) for r in trace.residual]
        trace.snapshots = {k: v[0] for k, v in trace.snapshots.items()}
    return Z, trace


# --- parameter-free targets ----------------------------------------------------------


def fixed_target_flow(mu0, target, kernel: KernelSpec, cfg: FlowConfig, T_vjp: Callable | None = None):
    """Particle descent on 1/2 MMD^2 towards a fixed measure or a pushforward of itself.

    ``target`` is either a DiscreteMeasure / point array (fixed nu) or a map
    ``T`` acting row-wise, in which case ``T_vjp`` must be given. The trace's
    ``residual`` holds MMD^2 (not halved) to the target at each recorded step.
    """
    x = torch.as_tensor(mu0.points if isinstance(mu0, DiscreteMeasure) else mu0, dtype=ad.DTYPE)
    xmask = torch.ones(x.shape[0], dtype=torch.bool)
    if callable(target):
        if T_vjp is None:
            raise ValueError("a map target needs its vector-Jacobian product")
        T = target

        def gradient(z):
            return wasserstein_gradient_pushforward_masked(kernel, z, xmask, T, T_vjp)

        def mmd(z):
            return mmd_sq_masked(kernel, z, xmask, T(z), xmask)
    else:
        nu = target.points[target.mask] if isinstance(target, DiscreteMeasure) else target
        y = torch.as_tensor(nu, dtype=ad.DTYPE)
        ymask = torch.ones(y.shape[0], dtype=torch.bool)

        def gradient(z):
            return mmd_flow_gradient_masked(kernel, z, xmask, y, ymask)

        def mmd(z):
            return mmd_sq_masked(kernel, z, xmask, y, ymask)

    trace = FlowTrace()
    snap = set(cfg.snapshot_at)
    with torch.no_grad():
        for step in range(cfg.iterations):
            if step in snap:
                trace.snapshots[step] = x.numpy().copy()
            g = gradient(x)
            if not torch.isfinite(g).all():
                raise NonFiniteGradient("non-finite gradient in MMD flow", step)
            if step % cfg.record_every == 0:
                m = float(mmd(x))
                trace.record(step, 0.5 * m, m)
            x = x - cfg.eta(step) * g
        m = float(mmd(x))
        trace.record(cfg.iterations, 0.5 * m, m)
        if cfg.iterations in snap:
            trace.snapshots[cfg.iterations] = x.numpy().copy()
    return DiscreteMeasure(x.numpy()), trace
