"""Command-line surface: init, train, render, eval, synth, bench."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import PipelineConfig, apply_overrides, architecture_hash, format_config, parse_config_file
from .initializer import combine_holistic, reproject_frame, write_ply
from .pipeline import build_cloud, build_deformation, build_trainer, load_model
from .rasterizer import project, render
from .scene_io import load_scene, split_frames
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .trainer import Trainer, set_deterministic


def _common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=None,
                        help="override train.seed / init.seed")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="force fixed-order reductions (bit-reproducible runs)")
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="single config override, repeatable")


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig()
    if args.config is not None:
        config = parse_config_file(args.config, config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides.setdefault("train.seed", str(args.seed))
        overrides.setdefault("init.seed", str(args.seed))
    if args.deterministic:
        overrides.setdefault("train.deterministic", "true")
    return apply_overrides(config, overrides) if overrides else config


def cmd_init(args) -> int:
    config = _load_config(args)
    frames, _ = load_scene(args.manifest)
    train, _ = split_frames(frames)
    clouds = [reproject_frame(f) for f in train]
    points = combine_holistic(clouds, keep_fraction=config.init.keep_fraction,
                              seed=config.init.seed)
    total = sum(len(c) for c in clouds)
    print(f"reprojected {total} points from {len(train)} frames, kept {len(points)}")
    if args.out is not None:
        write_ply(args.out, points)
        print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    set_deterministic(config.train.deterministic)
    frames, manifest = load_scene(args.manifest)
    train, test = split_frames(frames)
    if manifest.depth_mode == "monocular" and config.losses.depth_mode != "monocular":
        config = apply_overrides(config, {"losses.depth_mode": "monocular"})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(config))
    trainer = build_trainer(config, train, test, out_dir=out_dir)
    print(f"training {len(trainer.cloud)} Gaussians on {len(train)} frames "
          f"({len(test)} held out), {config.train.total_iters} iters")
    t0 = time.time()

    def progress(iteration, report):
        if iteration % 100 == 0:
            print(f"iter {iteration}: total {report.total:.5f} "
                  f"(color {report.color:.5f}, depth {report.depth:.5f})")

    trainer.run(progress=progress)
    final = out_dir / "final.splf"
    trainer.save_checkpoint(final)
    if test:
        rep = trainer.evaluate()
        print(f"held-out PSNR {rep.mean_psnr:.3f} dB, SSIM {rep.mean_ssim:.4f}")
    print(f"done in {(time.time() - t0) / 60:.1f} min; checkpoint at {final}")
    return 0


def _save_render(out, out_dir: Path, stem: str, depth_scale: float):
    out_dir.mkdir(parents=True, exist_ok=True)
    color8 = (out.color.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    depth16 = np.clip(np.round(out.depth.numpy() / depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(color8).save(out_dir / f"{stem}_color.png")
    Image.fromarray(depth16).save(out_dir / f"{stem}_depth.png")


def cmd_render(args) -> int:
    config = _load_config(args)
    frames, manifest = load_scene(args.manifest)
    cloud, deformation, iteration = load_model(args.checkpoint, config)
    if args.frame is not None:
        frame = frames[args.frame]
        t, camera, stem = frame.time, frame.camera, f"frame_{args.frame:04d}"
    else:
        t, camera, stem = args.time, frames[0].camera, f"time_{args.time:.3f}"
    with torch.no_grad():
        # A warmup-only checkpoint still has zero-initialized decoder heads,
        # so deforming is exactly the canonical render there.
        deformed = deformation.deform(cloud, t)
        out = render(project(deformed, camera, config.raster), camera, config.raster)
    _save_render(out, Path(args.out), stem, manifest.depth_scale)
    print(f"rendered t={t:.3f} -> {args.out}/{stem}_color.png (+16-bit depth)")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    frames, _ = load_scene(args.manifest)
    _, test = split_frames(frames)
    if not test:
        print("manifest has no test frames under the 7:1 split", file=sys.stderr)
        return 1
    cloud, deformation, _ = load_model(args.checkpoint, config)
    trainer = Trainer(cloud, deformation, test, test, config=config.train,
                      raster_config=config.raster, loss_weights=config.losses,
                      config_hash=architecture_hash(config))
    trainer.cloud = cloud.detach_clone()
    rep = trainer.evaluate(test, deformed=True)
    print("frame  time    PSNR     SSIM     PSNR(unmasked)  SSIM(unmasked)")
    for fr in rep.frames:
        print(f"{fr.index:5d}  {fr.time:.3f}  {fr.psnr:7.3f}  {fr.ssim:.5f}  "
              f"{fr.psnr_unmasked:14.3f}  {fr.ssim_unmasked:.5f}")
    print(f"mean   -      {rep.mean_psnr:7.3f}  {rep.mean_ssim:.5f}  "
          f"{rep.mean_psnr_unmasked:14.3f}  {rep.mean_ssim_unmasked:.5f}")
    if args.out is not None:
        rows = [dataclasses.asdict(fr) for fr in rep.frames]
        Path(args.out).write_text(json.dumps(
            {"frames": rows, "mean_psnr": rep.mean_psnr, "mean_ssim": rep.mean_ssim,
             "mean_psnr_unmasked": rep.mean_psnr_unmasked,
             "mean_ssim_unmasked": rep.mean_ssim_unmasked}, indent=2))
        print(f"wrote {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec(
        gaussian_count=args.gaussians, image_size=args.size, frame_count=args.frames,
        deformation=args.motion, amplitude=args.amplitude, seed=args.seed or 0,
        tool_mask=args.tool_mask)
    generate_synthetic(spec, args.out)
    print(f"wrote {args.frames}-frame synthetic scene to {args.out}/manifest.json")
    return 0


def cmd_bench(args) -> int:
    config = _load_config(args)
    spec = SyntheticSceneSpec(gaussian_count=args.gaussians, image_size=args.size,
                              frame_count=2, seed=args.seed or 0)
    from .synthetic import ground_truth_cloud, make_camera
    cloud = ground_truth_cloud(spec)
    camera = make_camera(spec)
    with torch.no_grad():
        proj = project(cloud, camera, config.raster)
        render(proj, camera, config.raster)  # warm up
        t0 = time.time()
        for _ in range(args.repeats):
            proj = project(cloud, camera, config.raster)
            render(proj, camera, config.raster)
        dt = time.time() - t0
    fps = args.repeats / dt
    print(f"{args.repeats} renders of {len(cloud)} Gaussians at "
          f"{camera.width}x{camera.height}: {fps:.2f} frames/sec "
          f"({dt / args.repeats * 1000:.1f} ms/frame, {torch.get_num_threads()} threads)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatfield",
        description="Dynamic-scene Gaussian splatting reconstruction (CPU)")
    parser.add_argument("--version", action="version", version=f"splatfield {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="run holistic initialization, emit a debug PLY")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, default=None, help="PLY output path")
    _common_flags(p)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("train", help="train a scene from a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _common_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint at a time or frame")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--manifest", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--time", type=float, default=None)
    group.add_argument("--frame", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="metrics table for a checkpoint on the test split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="JSON metrics output")
    _common_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gaussians", type=int, default=500)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--motion", choices=("rigid_translation", "radial_pulsation", "static"),
                   default="rigid_translation")
    p.add_argument("--amplitude", type=float, default=0.1)
    p.add_argument("--tool-mask", action="store_true")
    _common_flags(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("bench", help="render throughput on a fixed synthetic scene")
    p.add_argument("--gaussians", type=int, default=500)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--repeats", type=int, default=20)
    _common_flags(p)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (BrokenPipeError, KeyboardInterrupt):
        return 130
    except Exception as e:  # diagnostics to stderr, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
