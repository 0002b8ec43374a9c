"""Reverse-mode differentiation over dense arrays.

The tape is torch's autograd graph: tensors created with
``requires_grad=True`` are the leaves, every op below records its backward
rule, and :func:`grad` walks the graph in reverse topological order. This
module fixes the forward semantics of the ops the network and kernels need
(masking, tie-breaking, the zero-distance subgradient) and provides a
finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import NotScalarOutput, ShapeError

DTYPE = torch.float64
LN_EPS = 1e-5


def tensor(x, requires_grad: bool = False, dtype=DTYPE) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=dtype).clone()
    return t.requires_grad_(requires_grad)


# --- op set --------------------------------------------------------------------

add = torch.add
subtract = torch.sub
relu = torch.relu
exp = torch.exp


def scale(x: torch.Tensor, c: float) -> torch.Tensor:
    return x * c


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def contract(spec: str, *operands: torch.Tensor) -> torch.Tensor:
    """Tensor contraction in einsum notation (used by the bilinear layer)."""
    try:
        return torch.einsum(spec, *operands)
    except RuntimeError as exc:
        raise ShapeError(str(exc)) from None


def total(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim)


def concat(xs: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    return torch.cat(list(xs), dim=dim)


def split(x: torch.Tensor, size: int, dim: int = -1):
    if x.shape[dim] % size:
        raise ShapeError(f"cannot split axis of length {x.shape[dim]} into chunks of {size}")
    return torch.split(x, size, dim=dim)


def mask_rows(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Zero the rows (second-to-last axis) where ``mask`` is false."""
    if mask is None:
        return x
    return torch.where(mask.unsqueeze(-1), x, torch.zeros((), dtype=x.dtype))


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Softmax with mask-false logits treated as -inf.

    ``mask`` must broadcast against ``logits``.
    """
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=dim)


def layer_norm(x, gain, bias, mask=None, eps: float = LN_EPS):
    """Per-row layer normalization; masked rows come out as zero."""
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps) * gain + bias
    return mask_rows(y, mask)


def masked_mean(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Mean over the particle axis (-2) using active rows only."""
    if mask is None:
        return x.mean(-2)
    w = mask.to(x.dtype)
    s = mask_rows(x, mask).sum(-2)
    return s / w.sum(-1, keepdim=True)


def masked_max_pool(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Max over the particle axis (-2) of active rows.

    Gradient goes to the first maximal row on ties (``argmax`` returns the
    first occurrence).
    """
    if mask is not None:
        x = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    idx = torch.argmax(x.detach(), dim=-2, keepdim=True)
    return torch.gather(x, -2, idx).squeeze(-2)


def pairwise_sq_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    diff = x.unsqueeze(-2) - y.unsqueeze(-3)
    return (diff * diff).sum(-1)


def pairwise_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Euclidean distances between rows of ``x`` (..., N, d) and ``y`` (..., M, d).

    Exact (no epsilon smoothing). At zero distance the value is 0 and the
    gradient is the zero subgradient, to every order.
    """
    sq = pairwise_sq_distance(x, y)
    pos = sq > 0
    safe = torch.where(pos, sq, torch.ones((), dtype=sq.dtype))
    return torch.where(pos, torch.sqrt(safe), torch.zeros((), dtype=sq.dtype))


# --- differentiation -------------------------------------------------------------


def grad(output: torch.Tensor, wrt: Sequence[torch.Tensor], create_graph: bool = False,
         retain_graph: bool | None = None) -> list[torch.Tensor]:
    """Reverse-mode gradient of a scalar ``output``; unused leaves get zeros."""
    if output.numel() != 1:
        raise NotScalarOutput(f"output has shape {tuple(output.shape)}")
    wrt = list(wrt)
    if not output.requires_grad:
        return [torch.zeros_like(w) for w in wrt]
    gs = torch.autograd.grad(
        output.reshape(()), wrt, create_graph=create_graph,
        retain_graph=retain_graph, allow_unused=True,
    )
    return [torch.zeros_like(w) if g is None else g for g, w in zip(gs, wrt)]


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    per_input: list

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.1e}"


def finite_difference(f: Callable, inputs: Sequence[torch.Tensor], step: float = 1e-5):
    """Central finite differences of scalar ``f(*inputs)`` w.r.t. every entry."""
    base = [x.detach().clone() for x in inputs]
    out = []
    with torch.no_grad():
        for i, x in enumerate(base):
            g = torch.zeros_like(x)
            flat = x.view(-1)
            gflat = g.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                fp = float(f(*base))
                flat[j] = orig - step
                fm = float(f(*base))
                flat[j] = orig
                gflat[j] = (fp - fm) / (2 * step)
            out.append(g)
    return out


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max-abs error scaled by the numeric gradient's max-abs entry."""
    scale_ = max(numeric.abs().max().item(), analytic.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale_


def gradcheck(f: Callable, inputs: Sequence[torch.Tensor], tol: float = 1e-5,
              step: float = 1e-5) -> GradcheckReport:
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = grad(f(*leaves), leaves)
    numeric = finite_difference(f, inputs, step)
    errs = [relative_error(a.detach(), n) for a, n in zip(analytic, numeric)]
    worst = max(errs) if errs else 0.0
    return GradcheckReport(worst, tol, worst <= tol, errs)
