"""Command line entry points: generate, augment, train, complete, interpolate, render, eval."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .augmentation import augment
from .config import ConfigError, RunConfig, describe_defaults, load_config, parse_config
from .evaluation import (chamfer_metrics, freespace_rate, image_to_pointcloud, mean_abs_error, read_ply,
                         render, write_pgm, write_ply, write_report, write_sddi)
from .model import CheckpointError, SddfModel, checkpoint_load, checkpoint_save
from .scans import Dataset, atomic_write_bytes, read_scan, write_scan
from .shapes import (SensorModel, circle_ring, novel_view_ring, random_sphere_poses, simulate_scan,
                     standard_view_ring)
from .training import TrainingAborted, interpolate_codes, optimize_code, train, write_trace

log = logging.getLogger("sddf")


class CommandError(RuntimeError):
    pass


# ----------------------------------------------------------------- helpers


def make_sensor(cfg: RunConfig, pose, dim: int) -> SensorModel:
    s = cfg.sensor
    kind = s.kind if s.kind != "auto" else ("fan" if dim == 2 else "pinhole")
    return SensorModel(kind, pose, d_min=s.d_min, d_max=s.d_max, width=s.width, height=s.height,
                       focal=s.focal, rays=s.rays, span=math.radians(s.span_deg))


def training_poses(cfg: RunConfig, dim: int):
    if dim == 2:
        return circle_ring(cfg.sensor.views, cfg.sensor.radius)
    return standard_view_ring(cfg.sensor.views, cfg.sensor.radius)


def eval_poses(cfg: RunConfig, dim: int, count: int):
    return novel_view_ring(count, cfg.sensor.radius, dim, cfg.sensor.views)


def _scan_paths(args, default_dirs) -> list[Path]:
    if args.scans:
        paths = [Path(p) for p in args.scans]
    else:
        paths = []
        for d in default_dirs:
            paths = sorted(Path(d).glob("*.sdsc"))
            if paths:
                break
    if not paths:
        raise CommandError("no scan files found")
    return paths


def _load_model(path) -> SddfModel:
    path = Path(path)
    if not path.exists():
        raise CommandError(f"missing checkpoint {path}")
    return checkpoint_load(path)


def _code(model: SddfModel, instance: str | None):
    if model.arch.latent_dim == 0:
        return None
    if instance is None:
        if not model.latent:
            raise CommandError("checkpoint has no latent codes")
        instance = next(iter(model.latent))
    if instance not in model.latent:
        raise CommandError(f"unknown instance {instance!r}")
    return model.latent[instance]


def _render_views(model, z, cfg: RunConfig, out: Path, stem: str) -> list:
    dim = model.arch.dim
    clouds = []
    for k, pose in enumerate(eval_poses(cfg, dim, cfg.eval.views)):
        img = render(model, z, make_sensor(cfg, pose, dim))
        base = out / f"{stem}_r{k}"
        write_sddi(base.with_suffix(".sddi"), img)
        write_pgm(base.with_suffix(".pgm"), img)
        cloud = image_to_pointcloud(img)
        write_ply(base.with_suffix(".ply"), cloud.points)
        plotting.plot_distance_image(img, base.with_suffix(".png"))
        clouds.append(cloud.points)
    pts = np.concatenate(clouds) if clouds else np.zeros((0, dim))
    write_ply(out / f"{stem}.ply", pts)
    plotting.plot_points(pts, out / f"{stem}_cloud.png")
    return clouds


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    for ident, shape in cfg.shapes():
        dim = shape.dim
        for k, pose in enumerate(training_poses(cfg, dim)):
            scan = simulate_scan(shape, make_sensor(cfg, pose, dim), ident)
            scan = scan.capped(cfg.sensor.max_finite, cfg.sensor.max_infinite, rng)
            write_scan(out / "scans" / f"{ident}_v{k}.sdsc", scan)
        for k, pose in enumerate(eval_poses(cfg, dim, cfg.sensor.heldout_views)):
            scan = simulate_scan(shape, make_sensor(cfg, pose, dim), ident)
            write_scan(out / "heldout" / f"{ident}_h{k}.sdsc", scan)
        log.info("generated %s", ident)


def cmd_augment(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    ds = Dataset.from_files(_scan_paths(args, [out / "scans"]))
    a = cfg.augment
    for i, ident in enumerate(ds.ids):
        scan = ds.scans[ident]
        rng = np.random.default_rng([args.seed, i])
        radius = a.radius if a.radius is not None else cfg.sensor.radius
        sensors = [make_sensor(cfg, p, scan.dim) for p in random_sphere_poses(a.views, radius, rng, scan.dim)]
        if sensors:
            merged = augment(scan, sensors, a.method, a.bins, a.max_points, a.inflation, rng)
        else:
            merged = scan
        write_scan(out / "augmented" / f"{ident}.sdsc", merged)
        log.info("augmented %s: %d -> %d rays", ident, len(scan), len(merged))


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    ds = Dataset.from_files(_scan_paths(args, [out / "augmented", out / "scans"]))
    dims = {s.dim for s in ds.scans.values()}
    if len(dims) != 1:
        raise CommandError("scans of mixed dimension")
    dim = dims.pop()
    arch = cfg.arch_spec(dim)
    if len(ds) > 1 and arch.latent_dim == 0:
        raise CommandError("several instances need arch.latent_dim > 0")
    model = SddfModel.initialize(arch, np.random.default_rng(args.seed), cfg.arch.squasher)
    tcfg = cfg.train_config(args.seed)
    lcfg = cfg.loss_config(arch.latent_dim > 0)
    try:
        result = train(model, dict(ds.scans), lcfg, tcfg, threads=args.threads,
                       progress=lambda k, loss: log.info("iter %d loss %.6g", k, loss) if k % 100 == 0 else None)
    except TrainingAborted as exc:
        checkpoint_save(exc.model, out / "model.sddf")
        write_trace(out / "loss.csv", exc.trace)
        log.error("training aborted: %s", exc)
        return 3
    checkpoint_save(result.model, out / "model.sddf")
    write_trace(out / "loss.csv", result.trace)
    plotting.plot_loss(result.trace, out / "loss.png")
    return 0


def cmd_complete(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    model = _load_model(args.checkpoint or out / "model.sddf")
    if model.arch.latent_dim == 0:
        raise CommandError("completion needs a model with latent codes")
    scan = read_scan(args.scan)
    if scan.dim != model.arch.dim:
        raise CommandError("scan dimension does not match the checkpoint")
    rng = np.random.default_rng(args.seed)
    scan = scan.capped(cfg.train.complete_finite, cfg.train.complete_infinite, rng)
    tcfg = cfg.train_config(args.seed)
    lcfg = cfg.loss_config(True)
    z, trace = optimize_code(model, scan, lcfg, tcfg, threads=args.threads)
    ident = args.id or f"{scan.instance_id or 'new'}_completed"
    model.latent[ident] = z
    checkpoint_save(model, out / "completed.sddf")
    write_trace(out / "completion_loss.csv", trace)
    report = {"id": ident, "code": z.tolist(), "initial_loss": trace[0].loss if trace else None,
              "final_loss": trace[-1].loss if trace else None}
    atomic_write_bytes(out / "completion.json", (json.dumps(report, indent=2) + "\n").encode())
    _render_views(model, z, cfg, out / "completion", ident)


def cmd_interpolate(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    model = _load_model(args.checkpoint or out / "model.sddf")
    za, zb = _code(model, args.a), _code(model, args.b)
    if za is None:
        raise CommandError("interpolation needs a model with latent codes")
    weights = args.weights if args.weights is not None else cfg.eval.interpolation_weights
    for w in weights:
        _render_views(model, interpolate_codes(za, zb, w), cfg, out / "interpolation", f"w{w:g}")


def cmd_render(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    model = _load_model(args.checkpoint or out / "model.sddf")
    z = _code(model, args.instance)
    stem = args.instance or (next(iter(model.latent)) if model.latent else "model")
    _render_views(model, z, cfg, out / "render", stem)


def cmd_eval(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    if args.pred is not None:
        if args.gt is None:
            raise CommandError("--pred needs --gt")
        rep = chamfer_metrics(read_ply(args.pred), read_ply(args.gt), cfg.eval.normalize)
        write_report(out / "metrics.json", rep)
        return
    model = _load_model(args.checkpoint or out / "model.sddf")
    shapes = dict(cfg.shapes())
    ident = args.instance or next(iter(shapes))
    if ident not in shapes:
        raise CommandError(f"instance {ident!r} is not in the config")
    shape = shapes[ident]
    if shape.dim != model.arch.dim:
        raise CommandError("config shape dimension does not match the checkpoint")
    z = _code(model, ident if model.arch.latent_dim else None)
    pred, gt, i_rates, f_rates, errs = [], [], [], [], []
    for pose in eval_poses(cfg, shape.dim, cfg.eval.views):
        sensor = make_sensor(cfg, pose, shape.dim)
        oracle = simulate_scan(shape, sensor, ident)
        pred.append(image_to_pointcloud(render(model, z, sensor)).points)
        gt.append(oracle.hit_points())
        i, f = freespace_rate(model, z, oracle)
        i_rates.append(i)
        f_rates.append(f)
        errs.append(mean_abs_error(model, z, oracle))
    pred_pts, gt_pts = np.concatenate(pred), np.concatenate(gt)
    rep = chamfer_metrics(pred_pts, gt_pts, cfg.eval.normalize)
    write_report(out / "metrics.json", rep)
    extra = {"freespace_i_rate": float(np.mean(i_rates)), "freespace_f_rate": float(np.mean(f_rates)),
             "mean_abs_error": float(np.nanmean(errs)) if not all(np.isnan(errs)) else None}
    atomic_write_bytes(out / "freespace.json", (json.dumps(extra, indent=2, sort_keys=True) + "\n").encode())
    plotting.plot_points(pred_pts, out / "eval_cloud.png", reference=gt_pts)


COMMANDS = {
    "generate": cmd_generate,
    "augment": cmd_augment,
    "train": cmd_train,
    "complete": cmd_complete,
    "interpolate": cmd_interpolate,
    "render": cmd_render,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration keys and defaults:\n" + describe_defaults()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $SDDF_THREADS or 1)")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory (default ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sddf", description=__doc__, epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=epilog,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    add("generate", "simulate training and held-out scans of the configured shapes")
    p = add("augment", "synthesize rays from random viewpoints and merge them per instance")
    p.add_argument("--scans", nargs="+", help="scan files (default OUT/scans/*.sdsc)")
    p = add("train", "fit a model to scan files")
    p.add_argument("--scans", nargs="+", help="scan files (default OUT/augmented or OUT/scans)")
    p = add("complete", "fit a latent code to one partial scan")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--scan", type=Path, required=True)
    p.add_argument("--id", help="name for the completed instance")
    p = add("interpolate", "render blends of two latent codes")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--a", required=True, help="instance weighted by w")
    p.add_argument("--b", required=True, help="instance weighted by 1 - w")
    p.add_argument("--weights", type=float, nargs="+")
    p = add("render", "render distance images and point clouds from a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--instance")
    p = add("eval", "score a checkpoint against the configured shape, or two PLY clouds")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--instance")
    p.add_argument("--pred", type=Path)
    p.add_argument("--gt", type=Path)
    return parser


def resolve_threads(value) -> int:
    if value is None:
        value = os.environ.get("SDDF_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise CommandError(f"invalid thread count {value!r}") from None
    if n < 1:
        raise CommandError("thread count must be positive")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.threads = resolve_threads(args.threads)
        cfg = load_config(args.config) if args.config else parse_config({})
        result = COMMANDS[args.command](cfg, args)
        return int(result or 0)
    except (ConfigError, CommandError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"sddf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
