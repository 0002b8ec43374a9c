"""Outer training loop: batched inner solves, phantom gradient, Adam with step decay."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import diagnostics as diag
from . import net
from .errors import ConfigError, NonFiniteGradient
from .kernel import RIESZ, mmd_sq_masked
from .measure import DiscreteMeasure, Sample, add_free_particles, as_rng, pad_batch
from .solver import FlowConfig, Problem, solve_problem

TASKS = ("classify", "complete")


@dataclass
class TrainConfig:
    task: str = "classify"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_drops: tuple = (0.4, 0.8)
    lr_factor: float = 0.1
    latent_particles: int = 10
    free_fraction: float = 0.275
    noise_fraction: float = 0.05
    flow: FlowConfig = field(default_factory=FlowConfig)
    seed: int = 0
    damping: float = 1.0
    clip_norm: float | None = None  # 10.0 is a sensible value for long runs
    diagnostics_every: int = 0  # 0 disables the runtime monitors
    log_every: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("free_fraction", "noise_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.latent_particles < 1:
            raise ConfigError("latent_particles must be >= 1")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Base rate times ``lr_factor`` for every drop point already passed."""
    drops = sum(epoch >= round(f * cfg.epochs) for f in cfg.lr_drops)
    return cfg.lr * cfg.lr_factor**drops


# --- run record ------------------------------------------------------------------


@dataclass
class RunRecord:
    task: str
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        cols = ["step", "epoch", "loss", "residual_mean", "grad_norm", "lr"]
        return cols + ["accuracy"] if self.task == "classify" else cols

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def to_csv(self, path) -> None:
        _write_rows(path, self.columns, self.rows)

    def diagnostics_to_csv(self, path) -> None:
        cols = ["t", "eps_t", "pl_ratio", "grad_discrepancy_ratio", "theorem_ratio"]
        _write_rows(path, cols, self.diagnostics)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_rows(path, cols, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


# --- batch preparation -------------------------------------------------------------


@dataclass
class PreparedBatch:
    X: torch.Tensor
    xmask: torch.Tensor
    Z0: torch.Tensor
    zmask: torch.Tensor
    pin: torch.Tensor
    labels: torch.Tensor | None = None
    target: torch.Tensor | None = None
    tmask: torch.Tensor | None = None
    ids: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.X.shape[0]


def _t(a, dtype=ad.DTYPE):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def latent_init(sample: Sample, params: net.ModelParams, cfg: TrainConfig, rng):
    """Initial latent particles and pin mask for one sample.

    classify: J x p standard normal, nothing pinned. complete: the input plus
    free particles, zero-padded to p columns and pushed through the coupling
    layer; input-derived rows are pinned.
    """
    rng = as_rng(rng)
    p = params.config.latent_dim
    if cfg.task == "classify":
        return rng.standard_normal((cfg.latent_particles, p)), np.zeros(cfg.latent_particles, bool)
    grown, pin = add_free_particles(sample.input, cfg.free_fraction, rng)
    xt = np.zeros((grown.points.shape[0], p))
    xt[:, : grown.dim] = grown.points
    with torch.no_grad():
        z0 = net.coupling_forward(_t(xt), params).numpy()
    return z0, pin


def prepare_batch(samples: Sequence[Sample], params: net.ModelParams, cfg: TrainConfig, rng):
    rng = as_rng(rng)
    xb = pad_batch([s.input for s in samples])
    inits = [latent_init(s, params, cfg, rng) for s in samples]
    zb = pad_batch([DiscreteMeasure(z) for z, _ in inits])
    pin = np.zeros(zb.masks.shape, bool)
    for b, (_, pm) in enumerate(inits):
        pin[b, : pm.size] = pm
    out = PreparedBatch(
        X=_t(xb.points), xmask=_t(xb.masks, torch.bool),
        Z0=_t(zb.points), zmask=_t(zb.masks, torch.bool), pin=_t(pin, torch.bool),
        ids=[s.id for s in samples],
    )
    if cfg.task == "classify":
        out.labels = torch.tensor([int(s.label) for s in samples])
    else:
        tb = pad_batch([s.target for s in samples])
        out.target, out.tmask = _t(tb.points), _t(tb.masks, torch.bool)
    return out


# --- losses -----------------------------------------------------------------------------


def loss_classify(logits, label) -> torch.Tensor:
    """Mean cross-entropy with a log-sum-exp normalizer."""
    logits = torch.as_tensor(logits, dtype=ad.DTYPE)
    label = torch.as_tensor(label)
    if logits.dim() == 1:
        logits, label = logits.unsqueeze(0), label.reshape(1)
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, label.long().unsqueeze(-1)).squeeze(-1)
    return (lse - picked).mean()


def loss_complete(pred, target, pred_mask=None, target_mask=None) -> torch.Tensor:
    """Mean Riesz 1/2 MMD^2 between predicted and target clouds."""
    if isinstance(pred, DiscreteMeasure):
        pred, pred_mask = _t(pred.points), _t(pred.mask, torch.bool)
    if isinstance(target, DiscreteMeasure):
        target, target_mask = _t(target.points), _t(target.mask, torch.bool)
    return (0.5 * mmd_sq_masked(RIESZ, pred, pred_mask, target, target_mask)).mean()


def predict_cloud(Z, params, zmask, data_dim):
    """Map latents back to data space: inverse coupling, then the first d columns."""
    return net.coupling_inverse(Z, params, zmask)[..., :data_dim]


def task_loss(Z, batch: PreparedBatch, params, cfg: TrainConfig):
    if cfg.task == "classify":
        logits = net.classify_head(Z, params, batch.zmask)
        return loss_classify(logits, batch.labels), logits
    pred = predict_cloud(Z, params, batch.zmask, batch.X.shape[-1])
    return loss_complete(pred, batch.target, batch.zmask, batch.tmask), pred


# --- backward --------------------------------------------------------------------------


def _problem(batch: PreparedBatch, params, features_grad=False) -> Problem:
    return Problem.build(batch.Z0, batch.X, params, batch.zmask, batch.xmask, batch.pin,
                         features_grad=features_grad)


def phantom_step(Zstar, batch: PreparedBatch, params, cfg: TrainConfig):
    """One differentiable inner update at the detached fixed point."""
    prob = _problem(batch, params, features_grad=True)
    Z = Zstar.detach().requires_grad_(True)
    flow = cfg.flow
    g, _ = prob.direction(Z, flow.kernel, flow.rescale_by_n, create_graph=True)
    return Zstar.detach() - cfg.damping * flow.step_size * g


def phantom_backward(Zstar, batch: PreparedBatch, params, cfg: TrainConfig):
    """Loss on the phantom iterate Z+ and its gradient w.r.t. every parameter."""
    Zplus = phantom_step(Zstar, batch, params, cfg)
    loss, out = task_loss(Zplus, batch, params, cfg)
    grads = ad.grad(loss, params.parameters())
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("non-finite parameter gradient", -1)
    return loss.detach(), grads, out.detach()


def unrolled_backward(batch: PreparedBatch, params, cfg: TrainConfig, steps: int):
    """Exact backprop through ``steps`` inner updates from Z0 (reference for small runs)."""
    prob = _problem(batch, params, features_grad=True)
    flow = cfg.flow
    Z = batch.Z0.clone().requires_grad_(True)
    for k in range(steps):
        g, _ = prob.direction(Z, flow.kernel, flow.rescale_by_n, create_graph=True)
        Z = Z - flow.eta(k) * g
    loss, _ = task_loss(Z, batch, params, cfg)
    return loss.detach(), ad.grad(loss, params.parameters())


def inner_solve(batch: PreparedBatch, params, flow: FlowConfig):
    prob = _problem(batch, params)
    return solve_problem(prob, batch.Z0, flow)


# --- training -------------------------------------------------------------------------------


def _check_dataset(dataset, cfg):
    if not dataset:
        raise ConfigError("empty dataset")
    for s in dataset:
        if s.task != cfg.task:
            raise ConfigError(f"sample {s.id!r} is a {s.task} sample, config task is {cfg.task}")


def train(
    dataset: Sequence[Sample],
    model_cfg: net.ModelConfig,
    cfg: TrainConfig,
    params: net.ModelParams | None = None,
    checkpoint_dir=None,
    on_step: Callable | None = None,
):
    """Run the outer loop; returns (params, RunRecord)."""
    _check_dataset(dataset, cfg)
    params = net.init_params(model_cfg, cfg.seed) if params is None else params.clone()
    leaves = params.parameters()
    opt = torch.optim.Adam(leaves, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    record = RunRecord(cfg.task)
    sq_norms: list[float] = []
    step = 0
    n = len(dataset)
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                samples = [dataset[i] for i in order[start : start + cfg.batch_size]]
                batch = prepare_batch(samples, params, cfg, rng)
                Zstar, trace = inner_solve(batch, params, cfg.flow)
                loss, grads, out = phantom_backward(Zstar, batch, params, cfg)
                gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
                if cfg.clip_norm is not None and gnorm > cfg.clip_norm:
                    grads = [g * (cfg.clip_norm / gnorm) for g in grads]
                for leaf, g in zip(leaves, grads):
                    leaf.grad = g.clone()
                opt.step()
                opt.zero_grad(set_to_none=True)
                step += 1
                sq_norms.append(gnorm**2)
                res = trace.residual[-1] if len(trace) else np.zeros(batch.size)
                row = {
                    "step": step, "epoch": epoch, "loss": float(loss),
                    "residual_mean": float(np.mean(res)), "grad_norm": gnorm, "lr": lr,
                }
                if cfg.task == "classify":
                    row["accuracy"] = float((out.argmax(-1) == batch.labels).double().mean())
                if step % cfg.log_every == 0:
                    record.rows.append(row)
                if cfg.diagnostics_every and step >= 2 and step % cfg.diagnostics_every == 0:
                    record.diagnostics.append(
                        diag.monitor_row(params, batch, Zstar, step, sq_norms, cfg, rng)
                    )
                if on_step is not None:
                    on_step(step, row, params)
    except NonFiniteGradient:
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            net.save_checkpoint(params, Path(checkpoint_dir) / "abort.json", {"step": step})
        raise
    return params, record


# --- evaluation -----------------------------------------------------------------------------


EVAL_SEED_OFFSET = 104729


def _forward(dataset, params, cfg, batch_size):
    """Batched inner solves at evaluation time with a seed stream of their own."""
    _check_dataset(dataset, cfg)
    rng = np.random.default_rng(cfg.seed + EVAL_SEED_OFFSET)
    bs = batch_size or cfg.batch_size
    for start in range(0, len(dataset), bs):
        samples = list(dataset[start : start + bs])
        batch = prepare_batch(samples, params, cfg, rng)
        Zstar, trace = inner_solve(batch, params, cfg.flow)
        yield samples, batch, Zstar, trace


def predict(dataset: Sequence[Sample], params: net.ModelParams, cfg: TrainConfig,
            batch_size: int | None = None) -> list:
    """Per-sample outputs at Zstar: logits (classify) or (cloud, free_mask) (complete)."""
    out = []
    for samples, batch, Zstar, _ in _forward(dataset, params, cfg, batch_size):
        with torch.no_grad():
            if cfg.task == "classify":
                out.extend(net.classify_head(Zstar, params, batch.zmask).numpy())
                continue
            pred = predict_cloud(Zstar, params, batch.zmask, batch.X.shape[-1]).numpy()
        for b in range(len(samples)):
            active = batch.zmask[b].numpy()
            out.append((pred[b][active], (~batch.pin[b].numpy())[active]))
    return out


def evaluate(dataset: Sequence[Sample], params: net.ModelParams, cfg: TrainConfig,
             batch_size: int | None = None) -> dict:
    """Top-1 accuracy (classify) or mean 1/2 MMD^2 and W2 scores (complete) at Zstar."""
    correct = 0
    mmds, w2_free, w2_full, residuals = [], [], [], []
    for samples, batch, Zstar, trace in _forward(dataset, params, cfg, batch_size):
        if len(trace):
            residuals.extend(np.atleast_1d(trace.residual[-1]).tolist())
        with torch.no_grad():
            if cfg.task == "classify":
                logits = net.classify_head(Zstar, params, batch.zmask)
                correct += int((logits.argmax(-1) == batch.labels).sum())
                continue
            pred = predict_cloud(Zstar, params, batch.zmask, batch.X.shape[-1])
            m = 0.5 * mmd_sq_masked(RIESZ, pred, batch.zmask, batch.target, batch.tmask)
            mmds.extend(m.tolist())
        for b, s in enumerate(samples):
            pts = pred[b].numpy()
            free = (batch.zmask[b] & ~batch.pin[b]).numpy()
            full_pred = DiscreteMeasure(pts[batch.zmask[b].numpy()])
            w2_full.append(diag.w2_distance(full_pred, s.target))
            if s.removed is not None and free.any():
                w2_free.append(diag.w2_distance(DiscreteMeasure(pts[free]), s.removed))
    out = {"residual_mean": float(np.mean(residuals)) if residuals else 0.0}
    if cfg.task == "classify":
        out["accuracy"] = correct / len(dataset)
    else:
        out["mmd_half_sq"] = float(np.mean(mmds))
        out["w2_free"] = float(np.mean(w2_free)) if w2_free else float("nan")
        out["w2_full"] = float(np.mean(w2_full))
    return out
