"""Command line entry point: ``dnrf <command> [flags]``."""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import _backend
from .encoding import HashGridConfig
from .errors import DnrfError, IoFailure, LengthMismatch
from .renderer import DELTA

DEFAULT_GRID = HashGridConfig()
DEFAULT_TRAIN_STEPS = 32000


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error\tUsage\t{message}\n")
        sys.exit(2)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def _emit(name: str, value) -> None:
    print(f"{name}\t{_fmt(value)}")


# ---------------------------------------------------------------- commands


def cmd_generate_scene(args) -> int:
    from .dataset import generate_synthetic_scene

    root = generate_synthetic_scene(args.out, args.seed, args.frames, args.res, args.amplitude)
    _emit("scene", root)
    _emit("frames", args.frames)
    return 0


def cmd_train(args) -> int:
    from .dataset import load_checkpoint, load_scene, save_checkpoint
    from .trainer import TrainConfig, train

    scene = load_scene(args.scene)
    grid = HashGridConfig(levels=args.levels, table_size=2**args.table_log2,
                          features_per_entry=args.features, base_resolution=args.base_res,
                          finest_resolution=args.finest_res)
    cfg = TrainConfig(
        total_steps=args.steps, buffer_size=args.buffer_size,
        resample_period=args.resample_period, rays_per_step=args.rays_per_step,
        lambda_geom=args.lambda_geom, huber_rho=args.huber_rho, seed=args.seed,
        geom_prior=not args.no_geom_prior, global_conditioning=args.global_conditioning,
        occupancy_probes=args.occupancy_probes, holdout_last=args.holdout_last, grid_config=grid,
    )
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = Path(args.log) if args.log else Path(str(args.out_ckpt) + ".log")
    t0 = time.perf_counter()
    with open(log_path, "a" if resume else "w") as fh:
        def log(entry):
            fh.write(f"{entry.step}\t{entry.loss:.8g}\t{entry.psnr:.6g}\n")

        ck = train(scene, cfg, resume=resume, log=log)
    save_checkpoint(ck, args.out_ckpt)
    _emit("checkpoint", args.out_ckpt)
    _emit("steps", ck.train_step)
    _emit("seconds", round(time.perf_counter() - t0, 3))
    return 0


def _frame_index(scene, frame: int) -> int:
    if not -len(scene.frames) <= frame < len(scene.frames):
        raise IndexError(f"frame {frame} out of range for a scene with {len(scene.frames)} frames")
    return frame % len(scene.frames)


def cmd_render(args) -> int:
    from .dataset import load_checkpoint, load_scene, write_pfm, write_png
    from .renderer import render_image

    ck = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    fr = scene.frames[_frame_index(scene, args.frame)]
    cam = None
    if args.yaw_offset:
        cam = fr.camera.rotated_about_y(args.yaw_offset, fr.mesh.vertices.mean(axis=0))
    img = render_image(fr, ck.field(), ck.occupancy(), scene.background, camera=cam)
    out = Path(args.out)
    write_png(out, img.color)
    stem = out.with_suffix("")
    write_pfm(f"{stem}.z.pfm", img.depth)
    write_pfm(f"{stem}.opacity.pfm", img.opacity)
    _emit("color", out)
    _emit("depth", f"{stem}.z.pfm")
    _emit("opacity", f"{stem}.opacity.pfm")
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_checkpoint, load_scene
    from .trainer import evaluate

    ck = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    n = len(scene.frames)
    if not 1 <= args.split_last <= n:
        raise ValueError(f"--split-last must be in [1, {n}]")
    frames = range(n - args.split_last, n)
    res = evaluate(ck, scene, frames)
    _emit("frames", args.split_last)
    _emit("mse", res.mse)
    _emit("psnr", res.psnr)
    _emit("ssim", res.ssim)
    if args.yaw_offset:
        depth = evaluate(ck, scene, frames, yaw_offset=args.yaw_offset)
        _emit("depth_mae", depth.depth_mae)
    return 0


def _read_codes(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror}") from exc
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    try:
        vals = [[float(v) for v in row] for row in rows]
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    for i, row in enumerate(vals):
        if len(row) != 16:
            raise LengthMismatch(f"{path}: line {i + 1} has {len(row)} values, expected 16")
    return np.array(vals, dtype=np.float64).reshape(-1, 16)


def cmd_transfer_expression(args) -> int:
    from .trainer import transfer_expression

    src = _read_codes(args.source_codes)
    sn = _read_codes(args.source_neutral)
    tn = _read_codes(args.target_neutral)
    if len(sn) != 1 or len(tn) != 1:
        raise LengthMismatch("neutral code files must hold exactly one code")
    out = transfer_expression(list(src), sn[0], tn[0])
    lines = [" ".join(repr(float(v)) for v in code) for code in out]
    Path(args.out).write_text("\n".join(lines) + ("\n" if lines else ""))
    _emit("codes", len(out))
    _emit("out", args.out)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on worker threads; None uses all cores")

    p = _Parser(prog="dnrf", description="Mesh-guided deformable radiance fields.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-scene", parents=[common], formatter_class=fmt,
                       help="write a synthetic dynamic scene")
    g.add_argument("--out", required=True, help="output scene directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=60)
    g.add_argument("--res", type=int, default=64, help="image width and height in pixels")
    g.add_argument("--amplitude", type=float, default=0.15,
                   help="bump displacement as a fraction of the sphere radius")
    g.set_defaults(func=cmd_generate_scene)

    t = sub.add_parser(
        "train", parents=[common], formatter_class=fmt, help="optimize a radiance field",
        description=f"Rays are marched with a fixed step of sqrt(3)/1024 = {DELTA:.6g} "
                    "box-diagonal units through the occupancy grid.",
    )
    t.add_argument("--scene", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--steps", type=int, default=DEFAULT_TRAIN_STEPS, help="optimization steps")
    t.add_argument("--seed", type=int, default=0, help="seeds init, ray sampling and frame buffers")
    t.add_argument("--lambda-geom", type=float, default=1.25, help="depth prior weight")
    t.add_argument("--no-geom-prior", action="store_true", help="drop the depth prior")
    t.add_argument("--global-conditioning", action="store_true",
                   help="feed the expression code everywhere, not only in the mouth region")
    t.add_argument("--huber-rho", type=float, default=0.1, help="Huber color loss threshold")
    t.add_argument("--rays-per-step", type=int, default=4096, help="rays per optimization step")
    t.add_argument("--buffer-size", type=int, default=1700, help="frames per training buffer")
    t.add_argument("--resample-period", type=int, default=1500, help="steps between buffer draws")
    t.add_argument("--holdout-last", type=int, default=0,
                   help="exclude the last N frames from training")
    t.add_argument("--occupancy-probes", type=int, default=2**16,
                   help="uniform cells probed per occupancy update")
    t.add_argument("--levels", type=int, default=DEFAULT_GRID.levels)
    t.add_argument("--table-log2", type=int, default=int(math.log2(DEFAULT_GRID.table_size)))
    t.add_argument("--features", type=int, default=DEFAULT_GRID.features_per_entry)
    t.add_argument("--base-res", type=int, default=DEFAULT_GRID.base_resolution)
    t.add_argument("--finest-res", type=int, default=DEFAULT_GRID.finest_resolution)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--log", default=None, help="loss log path; None writes <out-ckpt>.log")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], formatter_class=fmt,
                       help="render one frame with the EMA weights")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--out", required=True,
                   help="PNG path; depth and opacity go next to it as .z.pfm / .opacity.pfm")
    r.add_argument("--yaw-offset", type=float, default=0.0, help="orbit the camera by this many degrees")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], formatter_class=fmt,
                       help="MSE / PSNR / SSIM on the last frames of a scene")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--split-last", type=int, required=True)
    e.add_argument("--yaw-offset", type=float, default=0.0,
                   help="also report depth MAE from cameras orbited by this many degrees")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("transfer-expression", parents=[common], formatter_class=fmt,
                       help="re-target expression codes to another neutral code")
    x.add_argument("--source-codes", required=True, help="text file, 16 numbers per line")
    x.add_argument("--source-neutral", required=True)
    x.add_argument("--target-neutral", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_transfer_expression)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            build_parser().error("--threads must be >= 1")
        _backend.set_num_threads(args.threads)
    try:
        return args.func(args)
    except DnrfError as exc:
        kind = exc.kind
        msg = str(exc)
    except (OSError, ValueError, IndexError, FloatingPointError) as exc:
        kind = type(exc).__name__
        msg = str(exc)
    sys.stderr.write(f"error\t{kind}\t{' '.join(msg.split())}\n")
    return 1


if __name__ == "__main__":
    sys.exit(main())
