"""Command-line entry points.

Subcommands cover the full workflow: synthesize a dataset, train, evaluate,
render (optionally incrementally), plus diagnostics (hash collision stats,
gradient check, encoder ablations, MI estimator sanity run).

All failures exit nonzero with a single machine-readable JSON error line on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import images as img_io
from .config import dump_resolved, load_config
from .hashgrid import HashGridConfig, HashTable, collision_stats
from .losses import MineEstimator
from .nn import adam_step
from .sampler import build_importance, save_importance
from .scene import SyntheticSpec, frame_times, generate_synthetic, load_dataset
from .trainer import (
    Trainer,
    ablate,
    evaluate,
    load_checkpoint,
    pipeline_gradcheck,
    save_checkpoint,
)
from .render import render_video_incremental


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        scene=args.scene,
        n_train_cameras=args.train_cams,
        n_test_cameras=args.test_cams,
        width=args.width,
        height=args.height,
        n_times=args.times,
        oracle_samples=args.oracle_samples,
    )
    ds = generate_synthetic(spec, args.out, np.random.default_rng(args.seed))
    print(json.dumps({"out": str(args.out), "cameras": len(ds.cameras), "T": ds.n_times}))
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_resolved(cfg, out / "config_resolved.json")
    trainer = Trainer(cfg, ds)
    if args.save_importance:
        save_importance(trainer.importance, out / "importance.msta")
    trainer.train(log_path=out / "metrics.ndjson", checkpoint_path=out / "checkpoint.msth")
    last = trainer.metrics[-1] if trainer.metrics else {}
    print(json.dumps({"out": str(out), "steps": trainer.step_count, "final": last}))
    return 0


def _cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    trainer = load_checkpoint(args.checkpoint, ds)
    report = evaluate(trainer, split=args.split, frame_stride=args.frame_stride,
                      supersample=args.supersample)
    report.pop("per_frame", None)
    blob = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(blob)
    print(blob)
    return 0


def _cmd_render(args) -> int:
    ds = load_dataset(args.data)
    trainer = load_checkpoint(args.checkpoint, ds)
    cam = ds.cameras[args.camera]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times = frame_times(ds.n_times)
    if args.incremental:
        frames, dyn_px, stats = render_video_incremental(
            trainer.field, cam, times, ds.bounds, args.epsilon,
            n_samples=trainer.cfg.n_samples, proposal=trainer.proposal,
            n_coarse=trainer.cfg.n_coarse,
        )
        for ti, frame in enumerate(frames):
            img_io.write_png(out / f"{ti:04d}.png", frame)
        img_io.write_png(out / "dynamic_pixels.png", dyn_px.astype(np.float64))
        print(json.dumps({"out": str(out), **stats}))
    else:
        t_indices = range(ds.n_times) if args.time is None else [args.time]
        for ti in t_indices:
            img, _, _ = trainer.render(cam, float(times[ti]))
            img_io.write_png(out / f"{ti:04d}.png", img)
        print(json.dumps({"out": str(out), "frames": len(list(t_indices))}))
    return 0


def _cmd_collision_stats(args) -> int:
    cfg = HashGridConfig(
        dims=args.dims,
        levels=args.levels,
        features_per_level=2,
        log2_table_size=args.log2_table_size,
        base_resolution=args.base_resolution,
        max_resolution=args.max_resolution,
        time_base_resolution=args.time_base_resolution if args.dims == 4 else None,
        time_max_resolution=args.time_max_resolution if args.dims == 4 else None,
    )
    rng = np.random.default_rng(args.seed)
    table = HashTable(cfg, rng)
    report = {}
    for level in range(cfg.levels):
        pts = rng.random((args.n_keys, cfg.dims))
        res = table.resolutions[level]
        keys = np.minimum((pts * res).astype(np.int64), res - 1)
        report[f"level_{level}"] = collision_stats(table, keys, level)
    print(json.dumps(report, indent=1))
    return 0


def _cmd_grad_check(args) -> int:
    report = pipeline_gradcheck(seed=args.seed)
    print(json.dumps(report, indent=1))
    return 0 if report["max_rel_err"] < args.tolerance else 1


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = load_dataset(args.data)
    report = ablate(cfg, ds)
    slim = {k: {kk: vv for kk, vv in v.items() if kk != "trainer"} for k, v in report.items()}
    blob = json.dumps(slim, indent=1)
    if args.out:
        Path(args.out).write_text(blob)
    print(blob)
    return 0


def _cmd_mine_sanity(args) -> int:
    """Train the MI critic on correlated Gaussians and report the estimate."""
    rng = np.random.default_rng(args.seed)
    mine = MineEstimator(rng, hidden_dim=args.hidden)
    cov = np.array([[1.0, args.rho], [args.rho, 1.0]])
    chol = np.linalg.cholesky(cov)
    for _ in range(args.steps):
        z = rng.standard_normal((args.batch, 2)) @ chol.T
        mine.estimate(z[:, 0], z[:, 1], rng, grad_scale=-1.0)
        adam_step(mine.params, args.lr)
        mine.params.zero_grads()
    vals = []
    for _ in range(args.eval_batches):
        z = rng.standard_normal((args.batch, 2)) @ chol.T
        v, _, _ = mine.estimate(z[:, 0], z[:, 1], rng)
        vals.append(v)
    analytic = -0.5 * np.log(1.0 - args.rho**2)
    print(json.dumps({"estimate": float(np.mean(vals)), "closed_form": analytic}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sthash", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scene", default="orbiter")
    sp.add_argument("--width", type=int, default=96)
    sp.add_argument("--height", type=int, default=96)
    sp.add_argument("--times", type=int, default=30)
    sp.add_argument("--train-cams", type=int, default=4)
    sp.add_argument("--test-cams", type=int, default=1)
    sp.add_argument("--oracle-samples", type=int, default=1024)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_synth)

    sp = sub.add_parser("train", help="train a field on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--save-importance", action="store_true")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--frame-stride", type=int, default=1)
    sp.add_argument("--supersample", type=int, default=1,
                    help="rays per pixel axis; >1 anti-aliases edges")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("render", help="render frames from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--camera", type=int, default=0)
    sp.add_argument("--time", type=int, default=None)
    sp.add_argument("--incremental", action="store_true")
    sp.add_argument("--epsilon", type=float, default=0.1)
    sp.set_defaults(func=_cmd_render)

    sp = sub.add_parser("collision-stats", help="hash occupancy statistics")
    sp.add_argument("--dims", type=int, default=4)
    sp.add_argument("--levels", type=int, default=8)
    sp.add_argument("--log2-table-size", type=int, default=19)
    sp.add_argument("--base-resolution", type=int, default=16)
    sp.add_argument("--max-resolution", type=int, default=256)
    sp.add_argument("--time-base-resolution", type=int, default=2)
    sp.add_argument("--time-max-resolution", type=int, default=16)
    sp.add_argument("--n-keys", type=int, default=2**20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_collision_stats)

    sp = sub.add_parser("grad-check", help="finite-difference gradient audit")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.set_defaults(func=_cmd_grad_check)

    sp = sub.add_parser("ablate", help="train and compare encoder variants")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=_cmd_ablate)

    sp = sub.add_parser("mine-sanity", help="MI estimator on correlated Gaussians")
    sp.add_argument("--rho", type=float, default=0.9)
    sp.add_argument("--steps", type=int, default=400)
    sp.add_argument("--batch", type=int, default=256)
    sp.add_argument("--hidden", type=int, default=64)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--eval-batches", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_mine_sanity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a parseable error, not a traceback
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
