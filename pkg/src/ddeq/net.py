"""DDEQ network: bilinear layer, attention encoders, coupling layer and head.

Every function works on batched tensors: latents Z are (B, N, p), inputs X
are (B, M, d), masks are boolean (B, N) / (B, M). Rows whose mask is false
are exactly zero in every output.

Wiring of the core map F(Z, X):

    Z -> FFN(p->b) -> LN ------------------+-----------+
                        |                  |           |
    X -> FFN(d->b) -> LN -> Bilinear(Z, X) + -> LN -> FFN(b->p) + Z -> LN
                  |                                              |
                  +-> FFN(b->p) -> LN -> self-enc(X)     self-enc(Z) (optional)
                                             |                   |
                                             +-----> cross-enc(Z <- X) -> FFN -> LN
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .errors import AllMasked, AllSourcesMasked, OddLatentDim, SchemaError, ShapeError

CHECKPOINT_FORMAT = "ddeq-params"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    data_dim: int = 2
    latent_dim: int = 128
    bilinear_dim: int = 16
    per_head_dim: int = 4
    cross_encoder_layers: int = 3
    self_encoder_layers: int = 1
    ffn_mult: int = 4
    pushforward_only: bool = False
    num_classes: int = 0
    coupling: bool = False

    def __post_init__(self):
        for f in ("data_dim", "latent_dim", "bilinear_dim", "per_head_dim"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.latent_dim % self.per_head_dim:
            raise ValueError("latent_dim must be divisible by per_head_dim")
        if self.coupling and self.latent_dim % 2:
            raise OddLatentDim("coupling layer needs an even latent_dim")

    @property
    def num_heads(self) -> int:
        return self.latent_dim // self.per_head_dim

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**{"latent_dim": 128, "bilinear_dim": 16, **kw})

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**{"latent_dim": 32, "bilinear_dim": 8, "cross_encoder_layers": 1, **kw})


class ModelParams:
    """Named parameter arrays plus the config that gives them meaning."""

    def __init__(self, config: ModelConfig, tensors: dict[str, torch.Tensor]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.tensors.items()},
        )

    def replace(self, **updates) -> "ModelParams":
        t = dict(self.tensors)
        t.update(updates)
        return ModelParams(self.config, t)


# --- initialization --------------------------------------------------------------


def _linear(gen, prefix, fan_in, fan_out, out):
    bound = 1.0 / math.sqrt(fan_in)
    out[f"{prefix}.w"] = (torch.rand(fan_in, fan_out, generator=gen, dtype=ad.DTYPE) * 2 - 1) * bound
    out[f"{prefix}.b"] = (torch.rand(fan_out, generator=gen, dtype=ad.DTYPE) * 2 - 1) * bound


def _ffn(gen, prefix, d_in, hidden, d_out, out):
    _linear(gen, f"{prefix}.0", d_in, hidden, out)
    _linear(gen, f"{prefix}.1", hidden, d_out, out)


def _ln(prefix, dim, out):
    out[f"{prefix}.g"] = torch.ones(dim, dtype=ad.DTYPE)
    out[f"{prefix}.b"] = torch.zeros(dim, dtype=ad.DTYPE)


def _encoder_layer(gen, prefix, p, hidden, out):
    for name in ("q", "k", "v", "o"):
        _linear(gen, f"{prefix}.attn.{name}", p, p, out)
    _ln(f"{prefix}.ln1", p, out)
    _ffn(gen, f"{prefix}.ffn", p, hidden, p, out)
    _ln(f"{prefix}.ln2", p, out)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    gen = torch.Generator().manual_seed(int(seed))
    p, b, d = config.latent_dim, config.bilinear_dim, config.data_dim
    hidden = config.ffn_mult * p
    t: dict[str, torch.Tensor] = {}
    _ffn(gen, "z_in", p, b, b, t)
    _ln("ln_z1", b, t)
    _ffn(gen, "x_in", d, b, b, t)
    _ln("ln_x1", b, t)
    t["bil.alpha"] = torch.randn(b, b, b, generator=gen, dtype=ad.DTYPE) / b
    t["bil.beta"] = torch.randn(b, b, b, generator=gen, dtype=ad.DTYPE) / b
    _ln("ln_z2", b, t)
    _ffn(gen, "z_up", b, p, p, t)
    _ln("ln_z3", p, t)
    _ffn(gen, "x_up", b, p, p, t)
    _ln("ln_x2", p, t)
    for i in range(config.self_encoder_layers):
        _encoder_layer(gen, f"enc_x.{i}", p, hidden, t)
        _encoder_layer(gen, f"enc_z.{i}", p, hidden, t)
    for i in range(config.cross_encoder_layers):
        _encoder_layer(gen, f"cross.{i}", p, hidden, t)
    _ffn(gen, "out", p, hidden, p, t)
    _ln("ln_out", p, t)
    if config.num_classes:
        _linear(gen, "head", p, config.num_classes, t)
    if config.coupling:
        h = p // 2
        _ffn(gen, "coupling.phi", h, h, h, t)
        _ffn(gen, "coupling.psi", h, h, h, t)
    return ModelParams(config, {k: v.requires_grad_(True) for k, v in t.items()})


# --- building blocks ----------------------------------------------------------------


def linear(x, params, prefix):
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def ffn(x, params, prefix, mask=None):
    h = ad.relu(linear(x, params, f"{prefix}.0"))
    return ad.mask_rows(linear(h, params, f"{prefix}.1"), mask)


def norm(x, params, prefix, mask=None):
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], mask)


def bilinear_forward(Z, X, alpha, beta, zmask=None, xmask=None, pushforward_only=False):
    """EI bilinear layer with masked means standing in for the all-ones sums.

    ``out[i, j] = sum_{l,n} alpha[l,j,n] Z[i,l] Xbar[n] + sum_{l,n} beta[l,j,n] Zbar[l] Xbar[n]``
    """
    q = alpha.shape[0]
    if Z.shape[-1] != q or X.shape[-1] != q or alpha.shape != (q, q, q):
        raise ShapeError(f"bilinear expects Z, X of width {q} and alpha of shape ({q},{q},{q})")
    xbar = ad.masked_mean(X, xmask)  # (B, q)
    out = ad.contract("bil,ljn,bn->bij", Z, alpha, xbar)
    if not pushforward_only:
        zbar = ad.masked_mean(Z, zmask)
        out = out + ad.contract("bl,ljn,bn->bj", zbar, beta, xbar).unsqueeze(-2)
    return ad.mask_rows(out, zmask)


def multihead_attention(tgt, src, params, prefix, num_heads, tgt_mask=None, src_mask=None):
    """Scalar dot-product multi-head attention of ``tgt`` rows over ``src`` rows."""
    B, N, p = tgt.shape
    M = src.shape[-2]
    if p % num_heads:
        raise ShapeError("latent width not divisible by number of heads")
    if src_mask is not None and not bool(src_mask.any(-1).all()):
        raise AllSourcesMasked("every sample needs at least one active source row")
    dh = p // num_heads
    q = linear(tgt, params, f"{prefix}.q").view(B, N, num_heads, dh).transpose(1, 2)
    k = linear(src, params, f"{prefix}.k").view(B, M, num_heads, dh).transpose(1, 2)
    v = linear(src, params, f"{prefix}.v").view(B, M, num_heads, dh).transpose(1, 2)
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(dh)  # (B, H, N, M)
    m = None if src_mask is None else src_mask[:, None, None, :]
    att = ad.masked_softmax(logits, m)
    h = (att @ v).transpose(1, 2).reshape(B, N, p)
    return ad.mask_rows(linear(h, params, f"{prefix}.o"), tgt_mask)


def encoder_block(x, params, prefix, num_heads, src=None, mask=None, src_mask=None):
    """MHA -> Add & Norm -> FFN -> Add & Norm. Self-attention when ``src`` is None."""
    if src is None:
        src, src_mask = x, mask
    a = multihead_attention(x, src, params, f"{prefix}.attn", num_heads, mask, src_mask)
    h = norm(x + a, params, f"{prefix}.ln1", mask)
    f = ffn(h, params, f"{prefix}.ffn", mask)
    return norm(h + f, params, f"{prefix}.ln2", mask)


def _pin(x, Z, pin):
    if pin is None:
        return x
    return torch.where(pin.unsqueeze(-1), Z, x)


def encode_source(X, params, xmask=None):
    """Latent-independent half of the core: returns (bilinear stream, encoded X)."""
    cfg = params.config
    xb = norm(ffn(X, params, "x_in", xmask), params, "ln_x1", xmask)
    xe = norm(ffn(xb, params, "x_up", xmask), params, "ln_x2", xmask)
    for i in range(cfg.self_encoder_layers):
        xe = encoder_block(xe, params, f"enc_x.{i}", cfg.num_heads, mask=xmask)
    return xb, xe


def core_from_features(Z, feats, params, zmask=None, xmask=None, pin=None):
    cfg = params.config
    xb, xe = feats
    a = norm(ffn(Z, params, "z_in", zmask), params, "ln_z1", zmask)
    bil = bilinear_forward(a, xb, params["bil.alpha"], params["bil.beta"], zmask, xmask,
                           cfg.pushforward_only)
    h = norm(bil + a, params, "ln_z2", zmask)
    h = norm(ffn(h, params, "z_up", zmask) + Z, params, "ln_z3", zmask)
    if not cfg.pushforward_only:
        for i in range(cfg.self_encoder_layers):
            h = _pin(encoder_block(h, params, f"enc_z.{i}", cfg.num_heads, mask=zmask), Z, pin)
    for i in range(cfg.cross_encoder_layers):
        h = encoder_block(h, params, f"cross.{i}", cfg.num_heads, src=xe, mask=zmask,
                          src_mask=xmask)
        h = _pin(h, Z, pin)
    out = norm(ffn(h, params, "out", zmask), params, "ln_out", zmask)
    return _pin(out, Z, pin)


def _batched(*ts):
    squeeze = ts[0] is not None and ts[0].dim() == 2
    if squeeze:
        ts = tuple(None if t is None else t.unsqueeze(0) for t in ts)
    return squeeze, ts


def ddeq_core_forward(Z, X, params, zmask=None, xmask=None, pin_mask=None):
    """F_theta(Z, X). Accepts batched (B, N, p) or single (N, p) inputs."""
    squeeze, (Z, X, zmask, xmask, pin_mask) = _batched(Z, X, zmask, xmask, pin_mask)
    out = core_from_features(Z, encode_source(X, params, xmask), params, zmask, xmask, pin_mask)
    return out.squeeze(0) if squeeze else out


# --- coupling layer and head ------------------------------------------------------------


def _halves(Z):
    p = Z.shape[-1]
    if p % 2:
        raise OddLatentDim(f"latent width {p} is odd")
    return Z[..., : p // 2], Z[..., p // 2 :]


def coupling_forward(Zt, params, mask=None):
    z1, z2 = _halves(Zt)
    phi = ffn(z1, params, "coupling.phi")
    psi = ffn(z1, params, "coupling.psi")
    return ad.mask_rows(ad.concat([z1, z2 * ad.exp(phi) + psi]), mask)


def coupling_inverse(Z, params, mask=None):
    z1, z2 = _halves(Z)
    phi = ffn(z1, params, "coupling.phi")
    psi = ffn(z1, params, "coupling.psi")
    return ad.mask_rows(ad.concat([z1, (z2 - psi) * ad.exp(-phi)]), mask)


def classify_head(Zstar, params, mask=None):
    if mask is not None and not bool(mask.any(-1).all()):
        raise AllMasked("classification head needs at least one active particle")
    pooled = ad.masked_max_pool(Zstar, mask)
    return linear(pooled, params, "head")


# --- checkpoints --------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "extra": extra or {},
        "params": [
            {"name": k, "shape": list(v.shape), "values": v.detach().reshape(-1).tolist()}
            for k, v in params.items()
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    tensors = {}
    for entry in doc["params"]:
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = torch.tensor(arr, dtype=ad.DTYPE, requires_grad=True)
    return ModelParams(cfg, tensors), doc.get("extra", {})
