"""``ddeq`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``manifest.json`` to its output directory before it
starts computing.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgmod
from . import diagnostics as diag
from . import gradchecks, net, train
from .errors import ConfigError, DDEQError, NonFiniteGradient, ParseError, SchemaError
from .kernel import RIESZ, rotation_map
from .measure import load_points_csv, save_measure_csv
from .solver import FlowConfig, fixed_target_flow

ROTATION_SNAPSHOTS = (0, 10, 50, 200, 1000, 2000)
ROTATION_MEAN = (-10.0, 0.0)
ROTATION_VAR = (1.0, 12.0)


class UsageError(Exception):
    pass


def _write_manifest(out: Path, command: str, argv, resolved: dict, seed) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "argv": list(argv),
        "config": resolved,
        "seed": seed,
        "version": __version__,
        "torch": torch.__version__,
        "layout": {
            "manifest": "manifest.json",
            "metrics": "metrics.csv",
            "diagnostics": "diagnostics.csv",
            "snapshots": "snapshots/",
            "checkpoints": "checkpoints/",
        },
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _write_metric_table(path: Path, metrics: dict) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v)) if isinstance(v, float) else v])


def _print_table(rows, header):
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


# --- train ---------------------------------------------------------------------------------


def _train_command(args, task: str) -> int:
    cfg = cfgmod.load(args.config)
    if cfg["task"] != task:
        raise ConfigError(f"{args.config}: task is {cfg['task']!r}, command expects {task!r}")
    out = Path(args.out)
    _write_manifest(out, f"train-{task}", args.argv, cfg, cfg["seed"])
    (out / "config.resolved").write_text(cfgmod.dump(cfg), encoding="utf-8")

    train_set, test_set = cfgmod.datasets(cfg)
    model_cfg, train_cfg = cfgmod.build(cfg, cfgmod.num_classes(train_set) or None)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    init = net.init_params(model_cfg, train_cfg.seed)
    extra = {"config": cfg}
    net.save_checkpoint(init, ckpt / "init.json", extra)

    params, record = train.train(train_set, model_cfg, train_cfg, init, checkpoint_dir=ckpt)
    net.save_checkpoint(params, ckpt / "final.json", extra)
    record.to_csv(out / "metrics.csv")
    record.diagnostics_to_csv(out / "diagnostics.csv")

    final = {"train_steps": len(record.rows), "final_train_loss": float(record.rows[-1]["loss"])}
    eval_set = test_set or train_set
    if task == "complete":
        final.update({f"untrained_{k}": v for k, v in train.evaluate(eval_set, init, train_cfg).items()})
    metrics = train.evaluate(eval_set, params, train_cfg)
    if task == "classify":
        final["final_accuracy"] = metrics.pop("accuracy")
    final.update({f"final_{k}": v for k, v in metrics.items()})
    _write_metric_table(out / "final_metrics.csv", final)
    if task == "complete":
        _completion_snapshots(eval_set[:4], params, train_cfg, out / "snapshots")
    _print_table([(k, v) for k, v in final.items()], ("metric", "value"))
    return 0


def _completion_snapshots(samples, params, cfg, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + train.EVAL_SEED_OFFSET)
    batch = train.prepare_batch(samples, params, cfg, rng)
    Zstar, _ = train.inner_solve(batch, params, cfg.flow)
    with torch.no_grad():
        pred = train.predict_cloud(Zstar, params, batch.zmask, batch.X.shape[-1])
    for b, s in enumerate(samples):
        m = batch.zmask[b].numpy()
        pts = pred[b].numpy()[m]
        pinned = batch.pin[b].numpy()[m].astype(float)[:, None]
        save_measure_csv(np.hstack([pts, pinned]), directory / f"{s.id}_prediction.csv",
                         [f"x{i}" for i in range(pts.shape[1])] + ["pinned"])
        save_measure_csv(s.target.active_points(), directory / f"{s.id}_target.csv")


# --- rotate-flow -------------------------------------------------------------------------------


def rotation_init(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.asarray(ROTATION_MEAN) + rng.standard_normal((n, 2)) * np.sqrt(ROTATION_VAR)


def run_rotation(k: int, iters: int, eta: float, decay: float, n: int, seed: int):
    """Flow towards rotational symmetry; returns (final cloud, trace, rotation map)."""
    T, T_vjp = rotation_map(2 * math.pi / k)
    snaps = tuple(s for s in ROTATION_SNAPSHOTS if s <= iters)
    if iters not in snaps:
        snaps += (iters,)
    flow = FlowConfig(iterations=iters, step_size=eta, step_decay=decay, record_every=1,
                      snapshot_at=snaps)
    mu, trace = fixed_target_flow(rotation_init(n, seed), T, RIESZ, flow, T_vjp=T_vjp)
    return mu, trace, T


def cmd_rotate_flow(args) -> int:
    if args.angle_div < 1:
        raise UsageError("--angle-div must be >= 1")
    if args.iters < 0 or args.n < 1:
        raise UsageError("--iters must be >= 0 and --n >= 1")
    out = Path(args.out)
    resolved = {k: getattr(args, k) for k in ("angle_div", "iters", "eta", "decay", "n", "seed",
                                              "threshold")}
    _write_manifest(out, "rotate-flow", args.argv, resolved, args.seed)
    mu, trace, T = run_rotation(args.angle_div, args.iters, args.eta, args.decay, args.n, args.seed)
    snap_dir = out / "snapshots"
    trace.save_snapshots(snap_dir, prefix="iter")
    with torch.no_grad():
        rotated = T(torch.as_tensor(mu.points)).numpy()
    save_measure_csv(rotated, snap_dir / "rotated_final.csv")
    trace.to_csv(out / "metrics.csv")
    initial, final = trace.residual[0], trace.residual[-1]
    ratio = final / initial if initial > 0 else 0.0
    summary = {"angle_div": args.angle_div, "mmd_sq_initial": initial, "mmd_sq_final": final,
               "ratio": ratio, "threshold": args.threshold,
               "below_threshold": int(ratio <= args.threshold)}
    _write_metric_table(out / "summary.csv", summary)
    _print_table([(k, v) for k, v in summary.items()], ("metric", "value"))
    return 0


# --- gradcheck / diagnose / eval -------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "gradcheck", args.argv, {"preset": args.preset, "tol": args.tol},
                    args.seed)
    results = gradchecks.run(args.preset, seed=args.seed, tol=args.tol)
    rows = [(n, f"{r.max_rel_error:.3e}", f"{r.tol:.1e}", "PASS" if r.passed else "FAIL")
            for n, r in results]
    _print_table(rows, ("check", "max_rel_error", "tol", "status"))
    with (out / "gradcheck.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "max_rel_error", "tol", "passed"])
        for n, r in results:
            w.writerow([n, repr(r.max_rel_error), repr(r.tol), int(r.passed)])
    return 0 if all(r.passed for _, r in results) else 1


def _load_artifacts(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    params, extra = net.load_checkpoint(ckpt)
    cfg = cfgmod.defaults()
    cfg.update(extra.get("config", {}))
    if getattr(args, "free_fraction", None) is not None:
        cfg["train.free_fraction"] = args.free_fraction
    _, train_cfg = cfgmod.build(cfg, params.config.num_classes or None)
    data = Path(args.dataset)
    if not data.is_file():
        raise UsageError(f"dataset not found: {data}")
    if data.suffix == ".json":
        doc = cfgmod.load_manifest(data)
        split = doc["splits"].get("test", doc["splits"]["train"])
        radius = float(doc.get("radius", cfg["data.radius"]))
        noise = float(doc.get("noise_fraction", cfg["train.noise_fraction"]))
        samples = cfgmod.load_split(split, train_cfg.task, radius, noise, cfg["data.seed"] + 1)
    else:
        samples = load_points_csv(data)
        if train_cfg.task == "classify" and any(s.label is None for s in samples):
            raise UsageError(f"{data}: classification checkpoint needs labelled data")
    if not samples:
        raise UsageError(f"{data}: no samples")
    return params, train_cfg, cfg, samples


def cmd_eval(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "eval", args.argv, {"checkpoint": args.checkpoint,
                                                "dataset": args.dataset}, None)
    params, train_cfg, _, samples = _load_artifacts(args)
    metrics = train.evaluate(samples, params, train_cfg)
    _write_metric_table(out / "eval.csv", metrics)
    _print_table([(k, v) for k, v in metrics.items()], ("metric", "value"))
    return 0


def cmd_diagnose(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "diagnose", args.argv, {"checkpoint": args.checkpoint,
                                                    "dataset": args.dataset,
                                                    "samples": args.samples}, None)
    params, train_cfg, cfg, samples = _load_artifacts(args)
    samples = samples[: max(2, args.samples)]
    if len(samples) < 2:
        raise UsageError("diagnose needs at least two samples")
    rng = np.random.default_rng(cfg["seed"])
    rows, sq_norms = [], []
    for t, s in enumerate(samples, start=1):
        batch = train.prepare_batch([s], params, train_cfg, rng)
        Zstar, _ = train.inner_solve(batch, params, train_cfg.flow)
        _, grads, _ = train.phantom_backward(Zstar, batch, params, train_cfg)
        sq_norms.append(sum(float((g * g).sum()) for g in grads))
        if t >= 2:
            rows.append(diag.monitor_row(params, batch, Zstar, t, sq_norms, train_cfg, rng))
    rec = train.RunRecord(train_cfg.task, diagnostics=rows)
    rec.diagnostics_to_csv(out / "diagnostics.csv")
    keys = ("pl_ratio", "grad_discrepancy_ratio", "theorem_ratio")
    table = []
    ok = True
    for k in keys:
        v = np.array([r[k] for r in rows])
        finite = bool(np.isfinite(v).all())
        ok &= finite
        table.append((k, f"{v.max():.6g}", "PASS" if finite else "FAIL"))
    _print_table(table, ("monitor", "max", "finite"))
    return 0 if ok else 1


def cmd_report(args) -> int:
    from . import report

    paths = report.render(Path(args.run_dir))
    for p in paths:
        print(p)
    return 0


# --- parser ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddeq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    for task in ("classify", "complete"):
        p = sub.add_parser(f"train-{task}", help=f"train a {task} model from a config file")
        p.add_argument("config")
        p.add_argument("--out", default=f"runs/{task}")

    p = sub.add_parser("rotate-flow", help="MMD flow towards a rotated copy of itself")
    p.add_argument("--angle-div", type=int, default=5, help="rotate by 2*pi/k")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--eta", type=float, default=10.0)
    p.add_argument("--decay", type=float, default=0.999)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-3,
                   help="pass if final/initial MMD^2 is at most this")
    p.add_argument("--out", default="runs/rotate")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--preset", choices=gradchecks.PRESETS, default="tiny")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/gradcheck")

    for name, helptext in (("diagnose", "convergence monitors on a checkpoint"),
                           ("eval", "evaluate a checkpoint on a dataset")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("dataset", help="points CSV or dataset manifest (.json)")
        p.add_argument("--out", default=f"runs/{name}")
        if name == "diagnose":
            p.add_argument("--samples", type=int, default=8)
        else:
            p.add_argument("--free-fraction", type=float, default=None)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("run_dir")
    return ap


COMMANDS = {
    "train-classify": lambda a: _train_command(a, "classify"),
    "train-complete": lambda a: _train_command(a, "complete"),
    "rotate-flow": cmd_rotate_flow,
    "gradcheck": cmd_gradcheck,
    "diagnose": cmd_diagnose,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    threads = args.threads or os.cpu_count() or 1
    torch.set_num_threads(max(1, threads))
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ParseError, SchemaError) as exc:
        print(f"ddeq: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteGradient as exc:
        print(f"ddeq: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return 1
    except (DDEQError, OSError, ValueError) as exc:
        print(f"ddeq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
