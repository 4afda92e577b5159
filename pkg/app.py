"""
DuoField - Disentangled shape/texture radiance fields (CLI)
Synthetic data → Auto-decoder training → Rendering, inversion, editing, meshes
"""

import argparse
import logging
import sys
from typing import Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from src import commands
from src.config import load_run_config
from src.errors import DuoFieldError


def _add_pose_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pose", help="pose JSON: {phi, theta, rho} in radians or {c2w}")
    p.add_argument("--phi", dest="phi_deg", type=float, help="azimuth in degrees")
    p.add_argument("--theta", dest="theta_deg", type=float, help="elevation in degrees")
    p.add_argument("--rho", type=float, help="camera distance")


def _add_camera_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=int, help="square image size (default: checkpoint intrinsics)")
    p.add_argument("--fov", type=float, help="field of view in degrees, used with --size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duofield", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--threads", type=int, help="cap on worker threads (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="synthetic datasets")
    dataset_sub = dataset.add_subparsers(dest="action", required=True)
    gen = dataset_sub.add_parser("gen", help="generate and export a synthetic dataset")
    gen.add_argument("--objects", type=int)
    gen.add_argument("--views", type=int)
    gen.add_argument("--size", type=int)
    gen.add_argument("--fov", type=float)
    gen.add_argument("--white", action="store_true", default=None, help="white background")
    gen.add_argument("-o", "--output")
    gen.set_defaults(handler=commands.cmd_dataset)

    train = sub.add_parser("train", help="joint network + latent training")
    train.add_argument("--data")
    train.add_argument("--iterations", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch", type=int, help="rays per batch")
    train.add_argument("--samples", type=int, help="samples per ray")
    train.add_argument("--variant", choices=["disentangled", "m1", "m2"])
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("-o", "--output")
    train.set_defaults(handler=commands.cmd_train)

    render = sub.add_parser("render", help="render a view from a checkpoint")
    render.add_argument("checkpoint")
    render.add_argument("--object", help="training object id")
    render.add_argument("--codes", help="JSON with z_s and z_t (e.g. an inversion result)")
    _add_pose_flags(render)
    _add_camera_flags(render)
    render.add_argument("--dump", help="also write the float image in the checkpoint container format")
    render.add_argument("-o", "--output")
    render.set_defaults(handler=commands.cmd_render)

    invert = sub.add_parser("invert", help="recover codes and pose from one image")
    invert.add_argument("checkpoint")
    invert.add_argument("image")
    invert.add_argument("--pose", help="initial pose JSON")
    invert.add_argument("--freeze-pose", action="store_true", help="optimise codes only")
    invert.add_argument("--iterations", type=int)
    _add_camera_flags(invert)
    invert.add_argument("-o", "--output")
    invert.set_defaults(handler=commands.cmd_invert)

    edit = sub.add_parser("edit", help="interpolate one code between two objects")
    edit.add_argument("checkpoint")
    edit.add_argument("object_a")
    edit.add_argument("object_b")
    edit.add_argument("--code", choices=["shape", "texture"], default="shape")
    edit.add_argument("--steps", type=int, default=5)
    edit.add_argument("--alphas", help="comma-separated weights in [0, 1]; overrides --steps")
    _add_pose_flags(edit)
    _add_camera_flags(edit)
    edit.add_argument("-o", "--output")
    edit.set_defaults(handler=commands.cmd_edit)

    mesh = sub.add_parser("mesh", help="extract a coloured mesh")
    mesh.add_argument("checkpoint")
    mesh.add_argument("--object")
    mesh.add_argument("--codes")
    mesh.add_argument("--resolution", type=int, default=64)
    mesh.add_argument("--iso", type=float, help="density level (default: Otsu threshold)")
    mesh.add_argument("-o", "--output")
    mesh.set_defaults(handler=commands.cmd_mesh)

    evaluate = sub.add_parser("eval", help="PSNR/SSIM report, optionally with pose inversion")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("--data")
    evaluate.add_argument("--invert", action="store_true", help="invert every view from an unknown pose")
    evaluate.add_argument("--iterations", type=int)
    evaluate.add_argument("-o", "--output")
    evaluate.set_defaults(handler=commands.cmd_eval)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    """Flags that land in the config tree; None means "not given"."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    out = {
        "seed": get("seed"),
        "threads": get("threads"),
        "train.rays_per_batch": get("batch"),
        "train.epochs": get("epochs"),
        "render.n_samples": get("samples"),
        "field.variant": get("variant"),
    }
    if args.command == "dataset":
        out.update({
            "data.objects": get("objects"),
            "data.views": get("views"),
            "data.size": get("size"),
            "data.fov_deg": get("fov"),
            "data.white_background": get("white"),
        })
    if args.command == "train":
        out["train.iterations"] = get("iterations")
        if get("seed") is not None:
            out["train.seed"] = get("seed")
    if args.command in ("invert", "eval"):
        out["infer.iterations"] = get("iterations")
        if get("seed") is not None:
            out["infer.seed"] = get("seed")
    return out


def _fail(code: str, message: str) -> int:
    print(f"error[{code}]: {' '.join(message.split())}", file=sys.stderr)
    return 1


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_run_config(args.config, _overrides(args))
        args.handler(args, cfg)
    except DuoFieldError as e:
        return _fail(e.code, e.message)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        return _fail("config", f"{where}: {first['msg']}" if where else first["msg"])
    except OSError as e:
        return _fail("io", f"{e.filename or ''}: {e.strerror}" if e.strerror else str(e))
    except KeyboardInterrupt:
        print("\nStopping...")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
