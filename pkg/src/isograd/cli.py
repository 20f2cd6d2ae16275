"""Command-line orchestration of the full pipeline."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import IsogradError
from .eval import chamfer_l1, downsample, extract_points, trim
from .grad import GradBuffer, backward_batch, fd_check
from .image_io import write_png8
from .initialization import build_surface_grid, fit_density
from .loss import photometric
from .ply import read_ply, write_ply
from .render import RenderConfig, render_batch, render_image
from .report import render_metrics_figure, write_metrics_csv
from .scene import (Camera, load_dataset, make_dataset, make_scene,
                    save_scene_bundle)
from .train import METRIC_FIELDS, train


def _apply_threads(requested: int | None):
    if requested is None:
        env = os.environ.get("ISOGRAD_THREADS")
        requested = int(env) if env else None
    if requested is None:
        return
    import numba
    numba.set_num_threads(max(1, min(int(requested), numba.config.NUMBA_NUM_THREADS)))


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_synth(args) -> int:
    scene = make_scene(args.scene, alpha=args.alpha)
    dataset, points = make_dataset(scene, args.views, args.res, seed=args.seed,
                                   gt_points=args.gt_points)
    save_scene_bundle(scene, dataset, points, args.out)
    print(f"wrote {args.views} views at {args.res}x{args.res} and "
          f"{points.shape[0]} ground-truth points to {args.out}")
    return 0


def cmd_fit_density(args) -> int:
    cfg = _load_config(args.config)
    dataset = load_dataset(args.data)
    fit_cfg = cfg.fit_config()
    res = cfg.get("fit.resolution")
    bbox = cfg.get("fit.bbox")
    grid, info = fit_density(dataset, fit_cfg, resolution=(res, res, res),
                             bbox_min=bbox[:3], bbox_max=bbox[3:])
    from .checkpoint import save_density
    save_density(grid, args.out)
    out = Path(args.out)
    csv_path = out.with_suffix(out.suffix + ".metrics.csv")
    write_metrics_csv(csv_path, info["log"], ("iter", "mse", "tv", "total"))
    render_metrics_figure(csv_path, out.with_suffix(out.suffix + ".metrics.png"))
    print(f"final training error {info['final_err']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    dataset = load_dataset(args.data)
    from .checkpoint import load_density
    density = load_density(args.init)
    grid = build_surface_grid(density,
                              tau_sigma=cfg.get("init.tau_sigma"),
                              s_sigma=cfg.get("init.s_sigma"),
                              prune_threshold=cfg.get("init.prune_threshold"))
    train_cfg = cfg.train_config()
    out = Path(args.out)
    csv_path = out.with_suffix(out.suffix + ".metrics.csv")
    grid, metrics = train(grid, dataset, train_cfg, out_ckpt=args.out,
                          metrics_csv=csv_path)
    render_metrics_figure(csv_path, out.with_suffix(out.suffix + ".metrics.png"))
    if metrics:
        print(f"final loss {metrics[-1]['total']:.6g} "
              f"(photometric {metrics[-1]['photometric']:.6g})")
    else:
        print("0 iterations: wrote converted, untrained checkpoint")
    return 0


def _camera_from_pose(args, cfg: RunConfig) -> Camera:
    pose = args.pose
    try:
        idx = int(pose)
    except ValueError:
        idx = None
    if idx is not None:
        if not args.data:
            raise IsogradError("--pose by index requires --data")
        dataset = load_dataset(args.data)
        if not 0 <= idx < len(dataset.cameras):
            raise IsogradError(f"pose index {idx} out of range "
                               f"(dataset has {len(dataset.cameras)} views)")
        return dataset.cameras[idx]
    with open(pose) as fh:
        meta = json.load(fh)
    w = int(meta["width"])
    h = int(meta["height"])
    if "focal" in meta:
        focal = float(meta["focal"])
    else:
        focal = 0.5 * w / np.tan(0.5 * float(meta["camera_angle_x"]))
    return Camera(width=w, height=h, focal=focal,
                  c2w=np.asarray(meta["transform_matrix"], np.float64))


def cmd_render(args) -> int:
    cfg = _load_config(args.config)
    from .checkpoint import load_surface
    grid = load_surface(args.ckpt)
    camera = _camera_from_pose(args, cfg)
    render_cfg = cfg.render_config()
    if args.depth:
        img, depth = render_image(grid, camera, render_cfg, with_depth=True)
        lo = np.nanmin(depth) if np.any(np.isfinite(depth)) else 0.0
        hi = np.nanmax(depth) if np.any(np.isfinite(depth)) else 1.0
        span = hi - lo if hi > lo else 1.0
        norm = np.nan_to_num((depth - lo) / span, nan=1.0)
        write_png8(args.depth, np.repeat(norm[..., None], 3, axis=2))
    else:
        img = render_image(grid, camera, render_cfg)
    write_png8(args.out, img, gamma=2.2)
    print(f"rendered {camera.width}x{camera.height} view to {args.out}")
    return 0


def cmd_extract(args) -> int:
    from .checkpoint import load_surface
    grid = load_surface(args.ckpt)
    points = extract_points(grid, rays_per_voxel_axis=args.rays_per_axis)
    if args.trim > 0.0:
        points = trim(points, args.trim)
    if args.cell is not None:
        points = downsample(points, args.cell)
    write_ply(args.out, points.positions, points.opacities)
    print(f"extracted {len(points)} surface points to {args.out}")
    return 0


def cmd_chamfer(args) -> int:
    pred, _ = read_ply(args.pred)
    gt, _ = read_ply(args.gt)
    print(json.dumps(chamfer_l1(pred, gt)))
    return 0


def cmd_gradcheck(args) -> int:
    from .checkpoint import load_surface
    grid = load_surface(args.ckpt)
    rng = np.random.default_rng(args.seed)
    origins = rng.normal(size=(args.rays, 3))
    origins *= 3.2 / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-0.5, 0.5, size=(args.rays, 3))
    dirs = targets - origins
    cfg = RenderConfig()

    def loss_and_grad(g):
        batch = render_batch(g, origins, dirs, cfg)
        loss = float(np.sum(batch.colors ** 2)) / args.rays
        buf = GradBuffer.zeros_like(g)
        backward_batch(g, batch, 2.0 * batch.colors / args.rays, cfg, buf=buf)
        return loss, buf

    report = fd_check(grid, loss_and_grad, subset_size=args.subset,
                      seed=args.seed)
    print(json.dumps({"max_rel_err": report["max_rel_err"],
                      "worst_param": report["worst_param"],
                      "n_checked": len(report["entries"])}))
    return 0 if report["max_rel_err"] < 1e-3 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isograd",
        description="Implicit-surface reconstruction from posed RGB images "
                    "with closed-form ray intersections.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (env ISOGRAD_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scene", required=True,
                   choices=["sphere", "thin_sheet", "semi_transparent_slab", "nested"])
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--res", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--gt-points", type=int, default=20000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-density", help="fit the density initialization grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_fit_density)

    p = sub.add_parser("train", help="convert a density grid and train the surface")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint from a pose")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pose", default="0", help="dataset view index or JSON file")
    p.add_argument("--data", default=None)
    p.add_argument("--depth", default=None, help="also write a depth PNG")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract", help="extract surface points to PLY")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trim", type=float, default=0.0)
    p.add_argument("--cell", type=float, default=None)
    p.add_argument("--rays-per-axis", type=int, default=4)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("chamfer", help="Chamfer-L1 between two PLY clouds")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_chamfer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rays", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subset", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "rays", None) is not None and args.rays <= 0:
        parser.error("--rays must be a positive integer")
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except IsogradError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
