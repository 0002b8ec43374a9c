"""Figures from a run directory's CSV outputs (metrics, diagnostics, snapshots)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(STYLE)
    return plt


def read_table(path: Path) -> dict[str, np.ndarray]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return {}
    header, body = rows[0], rows[1:]
    cols = {}
    for i, name in enumerate(header):
        try:
            cols[name] = np.array([float(r[i]) for r in body])
        except ValueError:
            cols[name] = np.array([r[i] for r in body])
    return cols


def _metrics_figure(plt, t: dict, out: Path) -> Path:
    x = t["step"]
    panels = [k for k in ("loss", "residual_mean", "objective", "residual", "grad_norm", "accuracy")
              if k in t and not (k == "objective" and "residual" in t)]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 2.8), squeeze=False)
    for ax, k in zip(axes[0], panels):
        ax.plot(x, t[k], lw=1.0)
        if k in ("residual", "residual_mean", "objective") and np.all(t[k] > 0):
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(k.replace("_", " "))
    path = out / "metrics.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def _diagnostics_figure(plt, t: dict, out: Path) -> Path:
    keys = ("pl_ratio", "grad_discrepancy_ratio", "theorem_ratio")
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 2.8))
    for ax, k in zip(axes, keys):
        ax.plot(t["t"], t[k], lw=1.0)
        ax.set_xlabel("outer step t")
        ax.set_title(k.replace("_", " "))
    path = out / "diagnostics.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def _snapshot_figure(plt, snaps: list[Path], out: Path) -> Path:
    overlay = [p for p in snaps if p.stem == "rotated_final"]
    frames = [p for p in snaps if p not in overlay]
    fig, axes = plt.subplots(1, len(frames), figsize=(2.4 * len(frames), 2.6), squeeze=False)
    for ax, p in zip(axes[0], frames):
        pts = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
        ax.scatter(pts[:, 0], pts[:, 1], s=3, c="tab:blue")
        if overlay and p is frames[-1]:
            rot = np.loadtxt(overlay[0], delimiter=",", skiprows=1, ndmin=2)
            ax.scatter(rot[:, 0], rot[:, 1], s=3, c="tab:orange", alpha=0.6)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title(p.stem.replace("_", " "), fontsize=8)
        ax.grid(False)
    path = out / "snapshots.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def render(run_dir: Path) -> list[Path]:
    """Write PNG figures into ``run_dir/figures`` for every CSV product found."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    plt = _pyplot()
    out = run_dir / "figures"
    out.mkdir(exist_ok=True)
    made = []
    metrics = run_dir / "metrics.csv"
    if metrics.is_file():
        t = read_table(metrics)
        if t and len(t.get("step", [])):
            made.append(_metrics_figure(plt, t, out))
    diag = run_dir / "diagnostics.csv"
    if diag.is_file():
        t = read_table(diag)
        if t and len(t.get("t", [])):
            made.append(_diagnostics_figure(plt, t, out))
    snap_dir = run_dir / "snapshots"
    if snap_dir.is_dir():
        snaps = sorted(p for p in snap_dir.glob("iter_*.csv")) + sorted(snap_dir.glob("rotated_final.csv"))
        if snaps:
            made.append(_snapshot_figure(plt, snaps, out))
    return made
