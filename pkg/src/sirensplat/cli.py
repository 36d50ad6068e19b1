"""Command-line interface.

Subcommands: synth, train, render, eval, gradcheck, inspect. Machine
output (one JSON document) goes to stdout; progress and human-facing notes
go to stderr. Exit status: 0 success, 1 bad input or usage, 2 training
collapse (non-finite loss).

Thread count resolution: --threads beats the NGS_THREADS environment
variable, which beats the single-threaded default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import apply_overrides, config_to_dict, default_config, load_config
from .dataset import PRESETS, generate_synthetic, load_dataset
from .errors import MalformedInputError, NanLossError, SplatError
from .gradcheck import run_check
from .geometry import Camera, matrix_to_quaternion
from .images import write_ngsf, write_png
from .losses import LossConfig, l1, psnr, ssim
from .primitives import HeadSpec
from .renderer import RenderOptions, render
from .trainer import train


def _threads_from(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("NGS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise MalformedInputError(f"NGS_THREADS={env!r} is not an integer") from e
    return 1


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_synth(args) -> int:
    size = _parse_size(args.size)
    data = generate_synthetic(
        args.preset,
        size=size,
        n_views=args.views,
        cell_px=args.cell_px,
        freq=args.freq,
        n_points=args.points,
        radius=args.radius,
        arc_deg=args.arc,
        seed=args.seed,
        texture_path=args.texture,
        out_dir=args.out,
    )
    _emit(
        {
            "preset": args.preset,
            "out": str(args.out),
            "views": len(data.views),
            "size": list(size),
            "points": int(len(data.initial_points)),
            "train_views": len(data.train_ids),
            "test_views": len(data.test_ids),
        }
    )
    return 0


def _parse_size(text: str) -> tuple[int, int]:
    w, sep, h = text.lower().partition("x")
    try:
        if not sep:
            return int(w), int(w)
        return int(w), int(h)
    except ValueError as e:
        raise MalformedInputError(f"bad --size {text!r}, expected WxH") from e


def cmd_train(args) -> int:
    cfg = default_config()
    if args.config:
        load_config(args.config, cfg)
    if args.set:
        apply_overrides(cfg, args.set)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.threads = _threads_from(args)

    data = load_dataset(args.data)
    views = data.train_views
    _note(f"training on {len(views)} views ({len(data.test_ids)} held out), "
          f"{cfg.iterations} iterations, strategy={cfg.densify.strategy}")

    echo = config_to_dict(cfg)
    last = {"n": 0}

    def progress(entry):
        if entry["iter"] % 500 == 0 or entry["iter"] == 1:
            _note(
                f"  iter {entry['iter']:6d}  loss {entry['loss']:.5f}  "
                f"psnr {entry['psnr']:6.2f}  prims {entry['n_primitives']}"
            )
        last["n"] = entry["n_primitives"]

    result = train(
        views,
        cfg,
        initial_points=data.initial_points,
        out_dir=args.out,
        on_step=progress,
        config_echo=echo,
    )
    final = result.metrics[-1] if result.metrics else {}
    _emit(
        {
            "iterations": cfg.iterations,
            "n_primitives": result.scene.n,
            "final_loss": final.get("loss"),
            "final_train_psnr": final.get("psnr"),
            "checkpoint": str(Path(args.out) / "checkpoint_final.ply"),
            "metrics": str(Path(args.out) / "metrics.jsonl"),
            "events": str(Path(args.out) / "events.jsonl"),
            "extent": result.extent,
            "densify_rounds": len(result.events),
        }
    )
    return 0


def _camera_from_json(text: str) -> Camera:
    try:
        desc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedInputError(f"--camera is not valid JSON: {e}") from e
    try:
        width = int(desc["width"])
        height = int(desc["height"])
        angle_x = float(desc["camera_angle_x"])
        mat = np.asarray(desc["transform_matrix"], dtype=np.float64)
    except KeyError as e:
        raise MalformedInputError(
            "--camera needs width, height, camera_angle_x, transform_matrix"
        ) from e
    if mat.shape != (4, 4):
        raise MalformedInputError("--camera transform_matrix must be 4x4")
    fx = 0.5 * width / np.tan(0.5 * angle_x)
    return Camera(
        width=width,
        height=height,
        fx=fx,
        fy=fx,
        cx=width / 2.0,
        cy=height / 2.0,
        position=mat[:3, 3],
        rotation=matrix_to_quaternion(mat[:3, :3]),
    )


def _parse_background(text: str) -> tuple:
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise MalformedInputError(f"bad --background {text!r}")
    return tuple(parts)


def cmd_render(args) -> int:
    scene, meta = load_checkpoint(args.checkpoint)
    if args.camera:
        camera = _camera_from_json(args.camera)
        gt = None
    elif args.data:
        data = load_dataset(args.data)
        if not 0 <= args.view < len(data.views):
            raise MalformedInputError(
                f"--view {args.view} out of range (dataset has {len(data.views)} views)"
            )
        camera = data.views[args.view].camera
        gt = data.views[args.view].image
    else:
        raise MalformedInputError("render needs --camera JSON or --data DIR")
    opts = RenderOptions(
        background=_parse_background(args.background), threads=_threads_from(args)
    )
    out = render(scene, camera, opts)
    path = Path(args.out)
    if path.suffix == ".ngsf":
        write_ngsf(path, out.rgb)
    else:
        write_png(path, out.rgb)
    doc = {
        "checkpoint": str(args.checkpoint),
        "out": str(path),
        "n_primitives": scene.n,
        "width": camera.width,
        "height": camera.height,
    }
    if gt is not None:
        doc["psnr_vs_dataset_view"] = float(psnr(out.rgb, gt))
    _emit(doc)
    return 0


def cmd_eval(args) -> int:
    scene, meta = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if args.split == "train":
        views = data.train_views
    elif args.split == "test":
        views = data.test_views
    elif args.split == "all":
        views = data.views
    else:
        raise MalformedInputError(f"bad --split {args.split!r}")
    if not views:
        raise MalformedInputError(f"split {args.split!r} holds no views")
    opts = RenderOptions(
        background=_parse_background(args.background), threads=_threads_from(args)
    )
    per_view = []
    cfg = LossConfig()
    for view in views:
        out = render(scene, view.camera, opts)
        per_view.append(
            {
                "name": view.name,
                "psnr": float(psnr(out.rgb, view.image)),
                "ssim": float(ssim(out.rgb, view.image, cfg)),
                "l1": float(l1(out.rgb, view.image)),
            }
        )
    _emit(
        {
            "checkpoint": str(args.checkpoint),
            "split": args.split,
            "n_views": len(per_view),
            "psnr": float(np.mean([v["psnr"] for v in per_view])),
            "ssim": float(np.mean([v["ssim"] for v in per_view])),
            "l1": float(np.mean([v["l1"] for v in per_view])),
            "per_view": per_view,
        }
    )
    return 0


def cmd_gradcheck(args) -> int:
    hs = [1e-3, 1e-4, 1e-5] if args.sweep else [args.h]
    head = HeadSpec.sh(degree=3) if args.head == "sh" else HeadSpec.siren()
    runs = []
    ok = True
    for h in hs:
        for lam in (1.0, 0.8):
            r = run_check(args.seed, lam=lam, h=h, n_prims=args.prims, size=args.size, head=head)
            runs.append(r)
            ok = ok and r["pass"]
            _note(
                f"  h={h:g} lambda={lam}: worst rel {r['worst_rel_error']:.2e} "
                f"({'ok' if r['pass'] else 'FAIL'})"
            )
    _emit({"seed": args.seed, "runs": runs, "pass": ok})
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    scene, meta = load_checkpoint(args.checkpoint)
    alpha = scene.opacity()
    scale = scene.scale()
    _emit(
        {
            "checkpoint": str(args.checkpoint),
            "meta": meta,
            "n_primitives": scene.n,
            "floats_per_primitive": scene.row_width,
            "opacity": {
                "min": float(alpha.min()),
                "median": float(np.median(alpha)),
                "max": float(alpha.max()),
            },
            "scale": {
                "min": float(scale.min()),
                "median": float(np.median(scale)),
                "max": float(scale.max()),
            },
            "center_bounds": {
                "lo": scene.mu.min(axis=0).tolist(),
                "hi": scene.mu.max(axis=0).tolist(),
            },
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sirensplat",
        description="2D Gaussian splatting with per-primitive sinusoidal color heads",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", required=True, choices=PRESETS)
    p.add_argument("--out", required=True)
    p.add_argument("--size", default="64", help="image size, W or WxH")
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--cell-px", type=float, default=8.0, dest="cell_px")
    p.add_argument("--freq", type=float, default=0.25, help="stripe frequency, cycles/px")
    p.add_argument("--points", type=int, default=64, help="initial point count")
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--arc", type=float, default=45.0, help="camera arc in degrees")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", default=None, help="image file for the texture preset")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="fit a scene to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help=".png or .ngsf")
    p.add_argument("--data", default=None, help="dataset dir to take a camera from")
    p.add_argument("--view", type=int, default=0, help="view index within --data")
    p.add_argument(
        "--camera",
        default=None,
        help='JSON: {"width", "height", "camera_angle_x", "transform_matrix"}',
    )
    p.add_argument("--background", default="0")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.add_argument("--background", default="0")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prims", type=int, default=6)
    p.add_argument("--size", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--sweep", action="store_true", help="run h in {1e-3, 1e-4, 1e-5}")
    p.add_argument("--head", default="siren", choices=("siren", "sh"))
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NanLossError as e:
        _note(f"error: {e}")
        return 2
    except SplatError as e:
        _note(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
