"""Discrete measures, datasets and preprocessing.

A discrete measure is a point matrix plus an activity mask; every active
particle carries mass ``1 / n_active``. Padded rows (mask false) are kept at
exactly zero so that batched computations can ignore them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateSpread,
    DimensionMismatch,
    EmptyPartial,
    ParseError,
    SchemaError,
)

SHAPE_FAMILIES = ("gaussian-mixture", "ring", "cross", "grid")


def as_rng(rng) -> np.random.Generator:
    # anything exposing generator draws (RandomState, test doubles) passes through
    if isinstance(rng, np.random.Generator) or hasattr(rng, "standard_normal"):
        return rng
    return np.random.default_rng(rng)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(eq=False)
class DiscreteMeasure:
    points: np.ndarray
    mask: np.ndarray | None = None
    allow_empty: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise DimensionMismatch(f"points must be N x d, got shape {pts.shape}")
        if self.mask is None:
            mask = np.ones(pts.shape[0], dtype=bool)
        else:
            mask = np.asarray(self.mask, dtype=bool).copy()
            if mask.shape != (pts.shape[0],):
                raise DimensionMismatch("mask length must equal number of rows")
        pts = np.where(mask[:, None], pts, 0.0)
        if not mask.any() and not self.allow_empty:
            raise ValueError("measure has no active particles")
        self.points = pts
        self.mask = mask

    @classmethod
    def from_points(cls, points) -> "DiscreteMeasure":
        return cls(np.asarray(points, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    @property
    def weights(self) -> np.ndarray:
        w = np.zeros(self.points.shape[0])
        if self.n_active:
            w[self.mask] = 1.0 / self.n_active
        return w

    def active_points(self) -> np.ndarray:
        return self.points[self.mask]

    def compact(self) -> "DiscreteMeasure":
        return DiscreteMeasure(self.active_points(), allow_empty=self.allow_empty)

    def with_padding(self, extra: int) -> "DiscreteMeasure":
        pts = np.vstack([self.points, np.zeros((extra, self.dim))])
        mask = np.concatenate([self.mask, np.zeros(extra, dtype=bool)])
        return DiscreteMeasure(pts, mask)

    def __eq__(self, other):
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.mask, other.mask)
        )

    def __repr__(self):
        return f"DiscreteMeasure(n={self.points.shape[0]}, active={self.n_active}, d={self.dim})"


@dataclass(eq=False)
class Sample:
    """One dataset pair: an input cloud with either a class label or a completion target.

    ``removed`` holds the ground-truth particles cut out of a completion
    input; evaluation compares free particles against it.
    """

    input: DiscreteMeasure
    label: int | None = None
    target: DiscreteMeasure | None = None
    id: str = ""
    removed: DiscreteMeasure | None = None

    def __post_init__(self):
        if (self.label is None) == (self.target is None):
            raise ValueError("exactly one of label or target must be set")

    @property
    def task(self) -> str:
        return "classify" if self.label is not None else "complete"


@dataclass
class Batch:
    points: np.ndarray  # B x N_max x d
    masks: np.ndarray  # B x N_max
    meta: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.points.shape[0]


# --- preprocessing -----------------------------------------------------------


def normalize(m: DiscreteMeasure) -> DiscreteMeasure:
    """Shift active particles to zero mean and scale to unit global std."""
    x = m.active_points()
    if x.shape[0] < 2:
        raise DegenerateSpread("normalization needs at least two active particles")
    centered = x - x.mean(axis=0)
    std = np.sqrt(np.mean(centered**2))
    # spread at roundoff level of the coordinates is not a real spread
    if std <= 64 * np.finfo(np.float64).eps * np.abs(x).max():
        raise DegenerateSpread("all active particles coincide")
    out = np.zeros_like(m.points)
    out[m.mask] = centered / std
    return DiscreteMeasure(out, m.mask)


def make_partial(m: DiscreteMeasure, r: float, rng) -> DiscreteMeasure:
    """Remove every active particle within distance ``r`` of two random active particles."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    rng = as_rng(rng)
    active = np.flatnonzero(m.mask)
    if active.size < 2:
        raise EmptyPartial("need at least two active particles to pick centers")
    centers = m.points[rng.choice(active, size=2, replace=False)]
    d0 = np.linalg.norm(m.points - centers[0], axis=1)
    d1 = np.linalg.norm(m.points - centers[1], axis=1)
    keep = m.mask & (d0 > r) & (d1 > r)
    if not keep.any():
        raise EmptyPartial(f"radius {r} removes every particle")
    return DiscreteMeasure(m.points, keep)


def add_free_particles(partial: DiscreteMeasure, fraction: float, rng):
    """Append ``round(fraction * n_active)`` standard-normal particles.

    Returns the enlarged (compacted) measure and a pin mask that is true on
    the original particles.
    """
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    rng = as_rng(rng)
    base = partial.active_points()
    k = round_half_up(fraction * base.shape[0])
    free = rng.standard_normal((k, partial.dim))
    pts = np.vstack([base, free])
    pin = np.concatenate([np.ones(base.shape[0], bool), np.zeros(k, bool)])
    return DiscreteMeasure(pts), pin


def add_noise(m: DiscreteMeasure, fraction: float, rng) -> DiscreteMeasure:
    """Resample ``round(fraction * n_active)`` random active particles from N(0, I)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = as_rng(rng)
    active = np.flatnonzero(m.mask)
    k = round_half_up(fraction * active.size)
    if k == 0:
        return DiscreteMeasure(m.points, m.mask)
    idx = rng.choice(active, size=k, replace=False)
    pts = m.points.copy()
    pts[idx] = rng.standard_normal((k, m.dim))
    return DiscreteMeasure(pts, m.mask)


def pad_batch(samples: Sequence[DiscreteMeasure], meta=None) -> Batch:
    if not samples:
        raise ValueError("cannot batch an empty list")
    d = samples[0].dim
    for s in samples:
        if s.dim != d:
            raise DimensionMismatch(f"dimension {s.dim} != {d}")
    counts = [s.n_active for s in samples]
    n_max = max(counts)
    pts = np.zeros((len(samples), n_max, d))
    masks = np.zeros((len(samples), n_max), dtype=bool)
    for b, s in enumerate(samples):
        pts[b, : counts[b]] = s.active_points()
        masks[b, : counts[b]] = True
    return Batch(pts, masks, list(meta) if meta is not None else [None] * len(samples))


def unbatch(batch: Batch) -> list[DiscreteMeasure]:
    return [DiscreteMeasure(batch.points[b][batch.masks[b]]) for b in range(batch.size)]


# --- CSV ---------------------------------------------------------------------


def _coord_columns(header):
    coords = [h for h in header if len(h) > 1 and h[0] == "x" and h[1:].isdigit()]
    expected = [f"x{i}" for i in range(len(coords))]
    if coords != expected or len(coords) == 0:
        raise SchemaError(f"coordinate columns must be x0..x{{d-1}}, got {coords}")
    return coords


def load_points_csv(path) -> list[Sample]:
    """Read the canonical points CSV (``sample_id,point_id,x0,x1[,x2],label``).

    Files without a ``label`` column yield completion-style samples whose
    target is the cloud itself.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    reader = csv.reader(text.splitlines())
    header = next(reader)
    if header[:2] != ["sample_id", "point_id"]:
        raise SchemaError("header must start with sample_id,point_id")
    coords = _coord_columns(header)
    has_label = "label" in header
    allowed = 2 + len(coords) + int(has_label)
    if len(header) != allowed:
        raise SchemaError(f"unexpected columns in header: {header}")
    ci = [header.index(c) for c in coords]
    li = header.index("label") if has_label else None

    order: list[str] = []
    rows: dict[str, list] = {}
    labels: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        sid = row[0]
        try:
            int(row[1])
            xyz = [float(row[i]) for i in ci]
            lab = int(row[li]) if li is not None else None
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if sid not in rows:
            order.append(sid)
            rows[sid] = []
            if lab is not None:
                labels[sid] = lab
        elif lab is not None and labels[sid] != lab:
            raise ParseError(f"inconsistent label for sample {sid}", lineno)
        rows[sid].append(xyz)

    out = []
    for sid in order:
        m = DiscreteMeasure(np.array(rows[sid]))
        if has_label:
            out.append(Sample(m, label=labels[sid], id=sid))
        else:
            out.append(Sample(m, target=m, id=sid))
    return out


def save_points_csv(samples: Sequence[Sample], path) -> None:
    path = Path(path)
    if not samples:
        path.write_text("", encoding="utf-8")
        return
    d = samples[0].input.dim
    has_label = samples[0].label is not None
    header = ["sample_id", "point_id"] + [f"x{i}" for i in range(d)]
    if has_label:
        header.append("label")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, s in enumerate(samples):
            sid = s.id or str(i)
            for j, p in enumerate(s.input.active_points()):
                row = [sid, j] + [repr(float(v)) for v in p]
                if has_label:
                    row.append(s.label)
                w.writerow(row)


def save_measure_csv(points: np.ndarray, path, header=None) -> None:
    """Write a bare point matrix with ``x0..x{d-1}`` columns (snapshot format)."""
    points = np.asarray(points)
    header = header or [f"x{i}" for i in range(points.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in points:
            w.writerow([repr(float(v)) for v in p])


# --- synthetic data ------------------------------------------------------------


def _template(family: str, cls: int, n: int, rng: np.random.Generator, proto) -> np.ndarray:
    if family == "ring":
        # class-dependent ellipse aspect and number of concentric rings
        t = rng.uniform(0, 2 * np.pi, n)
        inner = rng.random(n) < 0.5 if cls % 2 else np.zeros(n, dtype=bool)
        radius = np.where(inner, 0.5, 1.0)
        aspect = 1.0 + 0.5 * (cls // 2)
        pts = np.stack([aspect * radius * np.cos(t), radius * np.sin(t)], axis=1)
    elif family == "cross":
        arms = cls + 2
        a = rng.integers(0, arms, n) * (2 * np.pi / arms)
        s = rng.uniform(0, 1, n)
        pts = np.stack([s * np.cos(a), s * np.sin(a)], axis=1)
    elif family == "grid":
        k = cls + 2
        g = np.linspace(-1, 1, k)
        cells = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
        pts = cells[rng.integers(0, len(cells), n)]
    elif family == "gaussian-mixture":
        centers = proto
        pts = centers[rng.integers(0, len(centers), n)] + 0.15 * rng.standard_normal((n, 2))
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return pts + 0.03 * rng.standard_normal(pts.shape)


def synth_dataset(spec: dict) -> list[Sample]:
    """Deterministic desk-scale point-cloud dataset.

    ``spec`` keys: classes, samples_per_class, particles (max per cloud), dim
    (2 or 3), shape_family (one family, or a comma-separated list assigned to
    classes round-robin), seed. Clouds hold between 75% and 100% of
    ``particles`` points, are randomly rotated and normalized.
    """
    classes = int(spec.get("classes", 3))
    per_class = int(spec.get("samples_per_class", 100))
    particles = int(spec.get("particles", 64))
    dim = int(spec.get("dim", 2))
    seed = int(spec.get("seed", 0))
    families = [f.strip() for f in str(spec.get("shape_family", "ring")).split(",")]
    for f in families:
        if f not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {f!r}")
    if dim not in (2, 3):
        raise ValueError("synthetic data supports dim 2 or 3")

    proto_rng = np.random.default_rng([seed, 7919])
    protos = [proto_rng.uniform(-1, 1, (cls + 2, 2)) for cls in range(classes)]

    rng = np.random.default_rng(seed)
    out = []
    lo = max(2, int(math.ceil(0.75 * particles)))
    for cls in range(classes):
        family = families[cls % len(families)]
        # distinct template per class even when families repeat
        variant = cls // len(families) if len(families) > 1 else cls
        for i in range(per_class):
            n = int(rng.integers(lo, particles + 1))
            pts = _template(family, variant, n, rng, protos[cls])
            angle = rng.uniform(-0.25, 0.25)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            pts = pts @ rot.T
            if dim == 3:
                pts = np.hstack([pts, 0.05 * rng.standard_normal((n, 1))])
            m = normalize(DiscreteMeasure(pts))
            out.append(Sample(m, label=cls, id=f"c{cls}-{i}"))
    return out


def make_completion_samples(
    clouds: Sequence[DiscreteMeasure], r: float, noise_fraction: float, seed: int
) -> list[Sample]:
    """Turn complete clouds into (partial input, full target) completion pairs."""
    rng = np.random.default_rng(seed)
    out = []
    for i, cloud in enumerate(clouds):
        full = normalize(cloud.compact())
        for _ in range(100):
            try:
                partial = make_partial(full, r, rng)
                break
            except EmptyPartial:
                continue
        else:
            raise EmptyPartial(f"cloud {i}: could not create a partial cloud")
        removed = DiscreteMeasure(full.points[full.mask & ~partial.mask])
        inp = add_noise(partial.compact(), noise_fraction, rng) if noise_fraction else partial.compact()
        out.append(Sample(inp, target=full, id=f"s{i}", removed=removed))
    return out
