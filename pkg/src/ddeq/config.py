"""Flat ``key = value`` run configuration.

Every key is typed and has a default; unknown keys and malformed values are
errors. Lines starting with ``#`` are comments. Example::

    task = classify
    seed = 0
    model.latent_dim = 32
    flow.iterations = 50
    train.epochs = 10
    data.source = synthetic
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import measure
from .errors import ConfigError
from .kernel import KernelSpec
from .net import ModelConfig
from .solver import FlowConfig
from .train import TrainConfig


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "task": (str, "classify"),
    "seed": (int, 0),
    "model.latent_dim": (int, 128),
    "model.bilinear_dim": (int, 16),
    "model.per_head_dim": (int, 4),
    "model.cross_encoder_layers": (int, 3),
    "model.self_encoder_layers": (int, 1),
    "model.ffn_mult": (int, 4),
    "model.pushforward_only": (_bool, False),
    "flow.iterations": (int, 200),
    "flow.step_size": (float, 5.0),
    "flow.step_decay": (float, 1.0),
    "flow.rescale_by_n": (_bool, True),
    "flow.record_every": (int, 1),
    "flow.solver": (str, "wgd"),
    "flow.kernel": (str, "riesz"),
    "flow.sigma": (float, 1.0),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 64),
    "train.lr": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.lr_drop_first": (float, 0.4),
    "train.lr_drop_second": (float, 0.8),
    "train.lr_factor": (float, 0.1),
    "train.latent_particles": (int, 10),
    "train.free_fraction": (float, 0.275),
    "train.noise_fraction": (float, 0.05),
    "train.damping": (float, 1.0),
    "train.clip_norm": (float, 0.0),  # 0 disables clipping
    "train.diagnostics_every": (int, 0),
    "data.source": (str, "synthetic"),  # "synthetic" or a dataset manifest path
    "data.classes": (int, 3),
    "data.train_per_class": (int, 100),
    "data.test_per_class": (int, 50),
    "data.particles": (int, 64),
    "data.dim": (int, 2),
    "data.shape_family": (str, "ring,cross,gaussian-mixture"),
    "data.seed": (int, 0),
    "data.radius": (float, 0.6),
}


def defaults() -> dict:
    return {k: d for k, (_, d) in SCHEMA.items()}


def parse_text(text: str, origin: str = "<config>") -> dict:
    cfg = defaults()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        parser = SCHEMA[key][0]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from None
    build(cfg)  # validate eagerly
    return cfg


def load(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def dump(cfg: dict) -> str:
    lines = []
    for key in SCHEMA:
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def build(cfg: dict, num_classes: int | None = None):
    """Typed objects from a flat config: (ModelConfig, TrainConfig)."""
    task = cfg["task"]
    try:
        flow = FlowConfig(
            iterations=cfg["flow.iterations"],
            step_size=cfg["flow.step_size"],
            step_decay=cfg["flow.step_decay"],
            rescale_by_n=cfg["flow.rescale_by_n"],
            record_every=cfg["flow.record_every"],
            solver_kind=cfg["flow.solver"],
            kernel=KernelSpec(cfg["flow.kernel"], cfg["flow.sigma"]),
        )
        model = ModelConfig(
            data_dim=cfg["data.dim"],
            latent_dim=cfg["model.latent_dim"],
            bilinear_dim=cfg["model.bilinear_dim"],
            per_head_dim=cfg["model.per_head_dim"],
            cross_encoder_layers=cfg["model.cross_encoder_layers"],
            self_encoder_layers=cfg["model.self_encoder_layers"],
            ffn_mult=cfg["model.ffn_mult"],
            pushforward_only=cfg["model.pushforward_only"],
            num_classes=(num_classes or cfg["data.classes"]) if task == "classify" else 0,
            coupling=task == "complete",
        )
        clip = cfg["train.clip_norm"]
        train = TrainConfig(
            task=task,
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            lr=cfg["train.lr"],
            beta1=cfg["train.beta1"],
            beta2=cfg["train.beta2"],
            adam_eps=cfg["train.adam_eps"],
            lr_drops=(cfg["train.lr_drop_first"], cfg["train.lr_drop_second"]),
            lr_factor=cfg["train.lr_factor"],
            latent_particles=cfg["train.latent_particles"],
            free_fraction=cfg["train.free_fraction"],
            noise_fraction=cfg["train.noise_fraction"],
            flow=flow,
            seed=cfg["seed"],
            damping=cfg["train.damping"],
            clip_norm=clip if clip > 0 else None,
            diagnostics_every=cfg["train.diagnostics_every"],
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return model, train


# --- datasets -------------------------------------------------------------------------------


def _synthetic_clouds(cfg: dict, per_class: int, seed: int):
    spec = {
        "classes": cfg["data.classes"],
        "samples_per_class": per_class,
        "particles": cfg["data.particles"],
        "dim": cfg["data.dim"],
        "shape_family": cfg["data.shape_family"],
        "seed": seed,
    }
    return measure.synth_dataset(spec)


def _to_completion(samples, cfg, seed):
    return measure.make_completion_samples(
        [s.input for s in samples], cfg["data.radius"], cfg["train.noise_fraction"], seed
    )


def load_manifest(path) -> dict:
    """Dataset manifest: JSON with ``task``, split -> CSV path, preprocessing keys."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    splits = doc.get("splits")
    if not isinstance(splits, dict) or "train" not in splits:
        raise ConfigError(f"{path}: manifest needs a 'splits' object with a 'train' entry")
    doc["splits"] = {k: str((path.parent / v).resolve()) for k, v in splits.items()}
    return doc


def load_split(path, task: str, radius: float, noise: float, seed: int):
    samples = measure.load_points_csv(path)
    if task == "classify":
        if any(s.label is None for s in samples):
            raise ConfigError(f"{path}: classification data needs a label column")
        return samples
    return measure.make_completion_samples([s.input for s in samples], radius, noise, seed)


def datasets(cfg: dict):
    """(train, test) sample lists for a resolved config."""
    task, src = cfg["task"], cfg["data.source"]
    seed = cfg["data.seed"]
    if src == "synthetic":
        train = _synthetic_clouds(cfg, cfg["data.train_per_class"], seed)
        test = _synthetic_clouds(cfg, cfg["data.test_per_class"], seed + 1)
        if task == "complete":
            train, test = _to_completion(train, cfg, seed), _to_completion(test, cfg, seed + 1)
        return train, test
    doc = load_manifest(src)
    if doc.get("task", task) != task:
        raise ConfigError(f"manifest task {doc.get('task')!r} does not match config task {task!r}")
    radius = float(doc.get("radius", cfg["data.radius"]))
    noise = float(doc.get("noise_fraction", cfg["train.noise_fraction"]))
    sp = doc["splits"]
    train = load_split(sp["train"], task, radius, noise, seed)
    test = load_split(sp["test"], task, radius, noise, seed + 1) if "test" in sp else []
    return train, test


def num_classes(samples) -> int:
    labels = [s.label for s in samples if s.label is not None]
    return int(np.max(labels)) + 1 if labels else 0
