"""
Bodies of the command-line subcommands. Each takes the parsed arguments and
the merged RunConfig, writes its artifacts, and returns the main output path.
"""

import argparse
import json
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np

from src.camera import CameraPose, Intrinsics, pose_from_c2w
from src.checkpoint import Checkpoint, dump_image, load_checkpoint, save_checkpoint
from src.config import RunConfig, dump_run_config
from src.data import export_srn_dataset, generate_dataset, load_srn_dataset
from src.errors import ConfigError
from src.field import field_radiance_fn
from src.inference import InferConfig, dataset_rho, interpolate_codes, invert
from src.mesh import (
    GridSpec,
    color_vertices,
    export_obj,
    export_ply,
    marching_cubes,
    otsu_iso,
    sample_field_grid,
)
from src.metrics import outlier_filter, pose_error, psnr, ssim, write_report, SSIM_WINDOW
from src.render import load_png, render_image, save_png
from src.state import InversionState, TrainState
from src.train import train

logger = logging.getLogger("DuoField.Commands")


# ---- shared helpers ----

def checkpoint_intrinsics(ckpt: Checkpoint) -> Intrinsics:
    raw = ckpt.metadata.get("intrinsics")
    if raw is None:
        raise ConfigError("checkpoint carries no intrinsics; pass --size and --fov")
    return Intrinsics(**raw)


def resolve_intrinsics(args: argparse.Namespace, ckpt: Checkpoint) -> Intrinsics:
    size = getattr(args, "size", None)
    if size:
        return Intrinsics.from_fov(size, getattr(args, "fov", None) or 45.0)
    return checkpoint_intrinsics(ckpt)


def read_pose_json(path: str) -> CameraPose:
    """{"phi": .., "theta": .., "rho": ..} in radians, or {"c2w": [[...]]}."""
    try:
        raw = json.loads(Path(path).read_text())
        if "c2w" in raw:
            return pose_from_c2w(np.asarray(raw["c2w"], dtype=np.float64))
        return CameraPose(float(raw["phi"]), float(raw["theta"]), float(raw["rho"]))
    except OSError as e:
        raise ConfigError(f"cannot read pose {path}: {e.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed pose JSON {path}: {e}") from None


def resolve_pose(args: argparse.Namespace, ckpt: Checkpoint) -> CameraPose:
    if getattr(args, "pose", None):
        return read_pose_json(args.pose)
    rho = args.rho if getattr(args, "rho", None) is not None else dataset_rho(ckpt)
    phi = math.radians(args.phi_deg if getattr(args, "phi_deg", None) is not None else 0.0)
    theta = math.radians(args.theta_deg if getattr(args, "theta_deg", None) is not None else 30.0)
    return CameraPose(phi, theta, rho)


def resolve_codes(args: argparse.Namespace, ckpt: Checkpoint) -> tuple[np.ndarray, np.ndarray]:
    """Codes from --codes (an inversion result) or from the checkpoint row of --object."""
    if getattr(args, "codes", None):
        try:
            raw = json.loads(Path(args.codes).read_text())
            return np.asarray(raw["z_s"], dtype=np.float64), np.asarray(raw["z_t"], dtype=np.float64)
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"cannot read codes from {args.codes}: {e}") from None
    if getattr(args, "object", None):
        row = ckpt.object_index(args.object)
        return ckpt.latents.shape_codes.data[row].copy(), ckpt.latents.texture_codes.data[row].copy()
    return ckpt.latents.mean_codes()


def _output_dir(args: argparse.Namespace, cfg: RunConfig, name: str) -> Path:
    out = Path(args.output) if getattr(args, "output", None) else cfg.paths.output / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(args: argparse.Namespace, cfg: RunConfig) -> Path:
    return Path(args.data) if getattr(args, "data", None) else cfg.paths.data_root


# ---- commands ----

def cmd_dataset(args: argparse.Namespace, cfg: RunConfig) -> Path:
    out = Path(args.output) if args.output else cfg.paths.data_root
    print(f"🔧 Generating {cfg.data.objects} objects x {cfg.data.views} views "
          f"at {cfg.data.size}x{cfg.data.size} (seed {cfg.seed})...")
    dataset = generate_dataset(
        cfg.data.objects, cfg.data.views, cfg.data.size, cfg.seed,
        fov_deg=cfg.data.fov_deg, rho=cfg.data.rho, oracle_samples=cfg.data.oracle_samples,
        white_background=cfg.data.white_background, threads=cfg.threads,
    )
    export_srn_dataset(dataset, out)
    print(f"✅ Dataset written to {out}")
    return out


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> Path:
    dataset = load_srn_dataset(_data_dir(args, cfg), opencv_poses=cfg.data.opencv_poses)
    render_cfg = dataset.meta.render_config(
        cfg.render.n_samples,
        stratified=cfg.render.stratified,
        importance_samples=cfg.render.importance_samples,
    )
    out = _output_dir(args, cfg, "train")
    resume = load_checkpoint(args.resume) if args.resume else None
    dump_run_config(cfg, out / "config.json")
    state = TrainState()
    result = train(dataset, cfg.field, render_cfg, cfg.train, log_path=out / "train_log.jsonl",
                   resume=resume, state=state, snapshot_dir=out)
    ckpt_path = out / "model.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    if result.final_psnr is not None:
        print(f"✅ Final train PSNR: {result.final_psnr:.2f} dB (step {result.checkpoint.step})")
    else:
        print(f"✅ Nothing to train; checkpoint at step {result.checkpoint.step}")
    return ckpt_path


def cmd_render(args: argparse.Namespace, cfg: RunConfig) -> Path:
    ckpt = load_checkpoint(args.checkpoint)
    z_s, z_t = resolve_codes(args, ckpt)
    pose = resolve_pose(args, ckpt)
    K = resolve_intrinsics(args, ckpt)
    image = render_image(ckpt.params, z_s, z_t, pose, K, ckpt.render_config, threads=cfg.threads)
    out = Path(args.output) if args.output else cfg.paths.output / "render.png"
    save_png(out, image)
    if args.dump:
        dump_image(args.dump, image, {"pose": pose.to_dict()})
    print(f"✅ Rendered {K.width}x{K.height} image to {out}")
    return out


def cmd_invert(args: argparse.Namespace, cfg: RunConfig) -> Path:
    ckpt = load_checkpoint(args.checkpoint)
    image = load_png(args.image)
    K = resolve_intrinsics(args, ckpt)
    if image.shape[:2] != (K.height, K.width):
        raise ConfigError(f"image is {image.shape[1]}x{image.shape[0]} but the camera is "
                          f"{K.width}x{K.height}; pass --size and --fov")
    infer_cfg = cfg.infer
    init_pose = read_pose_json(args.pose) if args.pose else None
    if args.freeze_pose:
        if init_pose is None:
            raise ConfigError("--freeze-pose needs --pose")
        infer_cfg = infer_cfg.model_copy(update={"optimize_pose": False})
    out = _output_dir(args, cfg, "invert")

    state = InversionState()
    result = invert(image, K, ckpt, infer_cfg, init_pose=init_pose, state=state,
                    log_path=out / "invert_log.jsonl")
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    snap_dir = out / "snapshots"
    strip = []
    for key, snap in result.snapshots.items():
        name = f"iter_{int(key):04d}.png" if key.isdigit() else f"{key}.png"
        save_png(snap_dir / name, snap)
        strip.append(snap)
    save_png(out / "strip.png", np.concatenate(strip, axis=1))
    flag = " ⚠️ diverged" if result.diverged else ""
    print(f"✅ Inverted in {result.iterations} iterations, loss {result.losses[-1]:.4g}{flag}; "
          f"pose {result.pose.to_dict()}")
    return out / "result.json"


def _parse_alphas(text: Optional[str], steps: int) -> list[float]:
    if text:
        try:
            return [float(a) for a in text.split(",")]
        except ValueError:
            raise ConfigError(f"--alphas must be comma-separated numbers, got {text!r}") from None
    return [float(a) for a in np.linspace(0.0, 1.0, steps)]


def cmd_edit(args: argparse.Namespace, cfg: RunConfig) -> Path:
    ckpt = load_checkpoint(args.checkpoint)
    row_a, row_b = ckpt.object_index(args.object_a), ckpt.object_index(args.object_b)
    shapes, textures = ckpt.latents.shape_codes.data, ckpt.latents.texture_codes.data
    pose = resolve_pose(args, ckpt)
    K = resolve_intrinsics(args, ckpt)
    out = _output_dir(args, cfg, "edit")
    frames = []
    for i, alpha in enumerate(_parse_alphas(args.alphas, args.steps)):
        if args.code == "shape":
            z_s, z_t = interpolate_codes(shapes[row_a], shapes[row_b], alpha), textures[row_a]
        else:
            z_s, z_t = shapes[row_a], interpolate_codes(textures[row_a], textures[row_b], alpha)
        image = render_image(ckpt.params, z_s, z_t, pose, K, ckpt.render_config, threads=cfg.threads)
        save_png(out / f"{args.code}_{i:02d}.png", image)
        frames.append(image)
        logger.debug(f"{args.code} alpha {alpha:.3f} rendered")
    save_png(out / f"{args.code}_sweep.png", np.concatenate(frames, axis=1))
    print(f"✅ {len(frames)} {args.code} interpolation frames written to {out}")
    return out


def cmd_mesh(args: argparse.Namespace, cfg: RunConfig) -> Path:
    ckpt = load_checkpoint(args.checkpoint)
    z_s, z_t = resolve_codes(args, ckpt)
    radius = ckpt.metadata.get("dataset", {}).get("scene_radius", 1.0)
    spec = GridSpec.cube(args.resolution, radius)
    grid = sample_field_grid(ckpt.params, z_s, spec, z_t, threads=cfg.threads)
    iso = args.iso if args.iso is not None else otsu_iso(grid)
    mesh = marching_cubes(grid, iso)
    mesh = color_vertices(mesh, field_radiance_fn(ckpt.params, z_s, z_t), grid, threads=cfg.threads)
    out = _output_dir(args, cfg, "mesh")
    ply = export_ply(mesh, out / "mesh.ply")
    export_obj(mesh, out / "mesh.obj")
    print(f"✅ Mesh with {len(mesh.vertices)} vertices at iso {iso:.4g} written to {ply}")
    return ply


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> Path:
    """
    Per-view PSNR/SSIM of renders at the dataset poses. With --invert each
    view is instead explained from an unposed start, and pose errors plus the
    outlier statistics are reported.
    """
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_srn_dataset(_data_dir(args, cfg), opencv_poses=cfg.data.opencv_poses)
    out = _output_dir(args, cfg, "eval")
    rows, pose_errors = [], []
    for obj in dataset.objects:
        known = obj.object_id in ckpt.object_ids
        if not known and not args.invert:
            logger.warning(f"{obj.object_id} is not in the checkpoint; skipped (use --invert)")
            continue
        for i, view in enumerate(obj.views):
            gt_pose = pose_from_c2w(view.c2w)
            row = {"object": obj.object_id, "view": i}
            if args.invert:
                infer_cfg: InferConfig = cfg.infer.model_copy(update={"seed": cfg.infer.seed + i})
                result = invert(view.image, view.intrinsics, ckpt, infer_cfg)
                image = result.snapshots["final"]
                err = pose_error(result.pose, gt_pose)
                pose_errors.append(err)
                row.update(rot_deg=err.rot_deg, trans_rel=err.trans_rel, diverged=result.diverged)
            else:
                r = ckpt.object_index(obj.object_id)
                z_s, z_t = ckpt.latents.shape_codes.data[r], ckpt.latents.texture_codes.data[r]
                image = render_image(ckpt.params, z_s, z_t, view.extrinsic, view.intrinsics,
                                     ckpt.render_config, threads=cfg.threads)
            row["psnr"] = psnr(image, view.image)
            row["ssim"] = ssim(image, view.image) if min(image.shape[:2]) >= SSIM_WINDOW else None
            rows.append(row)
            logger.info(f"{obj.object_id} view {i}: PSNR {row['psnr']:.2f} dB")

    finite = [r["psnr"] for r in rows if math.isfinite(r["psnr"])]
    summary = {
        "views": len(rows),
        "mean_psnr": float(np.mean(finite)) if finite else None,
        "mean_ssim": float(np.mean([r["ssim"] for r in rows if r["ssim"] is not None]))
        if any(r["ssim"] is not None for r in rows) else None,
    }
    if pose_errors:
        split = outlier_filter(pose_errors)
        summary.update(split.to_dict())
        inlier_psnr = [rows[i]["psnr"] for i in split.inliers if math.isfinite(rows[i]["psnr"])]
        summary["mean_psnr_without_outliers"] = float(np.mean(inlier_psnr)) if inlier_psnr else None
    report, _ = write_report(out / "report.json", rows, summary)
    mean = summary["mean_psnr"]
    print(f"✅ Evaluated {len(rows)} views" + (f", mean PSNR {mean:.2f} dB" if mean is not None else ""))
    return report
