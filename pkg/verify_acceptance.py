"""
Desk-scale acceptance run: toy training, held-out views, single-view
inversion from a perturbed pose, and the analytic-sphere mesh.
Takes tens of minutes on a laptop CPU.
"""

import logging
import math
import sys
import time

import numpy as np
from dotenv import load_dotenv

from src.camera import CameraPose, pose_from_c2w
from src.data import SyntheticObject, generate_dataset, held_out_views, oracle_density, oracle_radiance_fn
from src.field import FieldConfig
from src.inference import InferConfig, invert
from src.mesh import GridSpec, color_vertices, euler_characteristic, marching_cubes, mean_radius, sample_grid
from src.metrics import outlier_filter, pose_error, psnr
from src.render import render_image
from src.train import TrainConfig, train

SEED = 0


def verify_training():
    print("--- Toy training ---")
    dataset = generate_dataset(4, 20, 16, seed=SEED)
    render_cfg = dataset.meta.render_config(64)
    start = time.time()
    result = train(dataset, FieldConfig(), render_cfg, TrainConfig(iterations=2000, seed=SEED))
    minutes = (time.time() - start) / 60.0
    ckpt = result.checkpoint

    eval_cfg = render_cfg.model_copy(update={"stratified": False})
    scores = []
    for row, obj in enumerate(dataset.objects):
        z_s, z_t = ckpt.latents.shape_codes.data[row], ckpt.latents.texture_codes.data[row]
        for view in obj.views:
            scores.append(psnr(render_image(ckpt.params, z_s, z_t, view.extrinsic, view.intrinsics, eval_cfg),
                               view.image))
    train_psnr = float(np.mean(scores))
    mark = "✅" if train_psnr >= 25.0 else "❌"
    print(f"{mark} Train-view PSNR {train_psnr:.2f} dB (target 25) in {minutes:.1f} min")

    held_out = held_out_views(dataset, 5, seed=SEED + 1)
    scores = []
    for row, obj in enumerate(held_out.objects):
        z_s, z_t = ckpt.latents.shape_codes.data[row], ckpt.latents.texture_codes.data[row]
        for view in obj.views:
            scores.append(psnr(render_image(ckpt.params, z_s, z_t, view.extrinsic, view.intrinsics, eval_cfg),
                               view.image))
    test_psnr = float(np.mean(scores))
    mark = "✅" if test_psnr >= 20.0 else "❌"
    print(f"{mark} Held-out-view PSNR {test_psnr:.2f} dB (target 20)")
    return ckpt


def verify_inversion(ckpt):
    print("\n--- Single-view inversion ---")
    unseen = generate_dataset(1, 2, 16, seed=SEED + 100)
    view, other = unseen.objects[0].views
    gt = pose_from_c2w(view.c2w)

    errors = []
    for trial in range(10):
        phi, theta, rho = gt.values()
        start = CameraPose(phi + math.radians(40.0), theta, rho)
        result = invert(view.image, view.intrinsics, ckpt, InferConfig(seed=trial), init_pose=start)
        err = pose_error(result.pose, gt)
        errors.append(err)
        flag = " (diverged)" if result.diverged else ""
        print(f"   trial {trial}: rotation {err.rot_deg:.2f} deg, translation {100 * err.trans_rel:.2f} %{flag}")
    summary = outlier_filter(errors)
    converged = len(summary.inliers)
    mark = "✅" if converged >= 8 else "❌"
    print(f"{mark} {converged}/10 trials within 5 deg / 3 % "
          f"(rot<5: {summary.rot_under_5:.0%}, trans<3%: {summary.trans_under_3:.0%})")

    print("\n--- Codes with the pose known ---")
    frozen = InferConfig(optimize_pose=False)
    result = invert(view.image, view.intrinsics, ckpt, frozen, init_pose=gt)
    other_pose = pose_from_c2w(other.c2w)
    eval_cfg = ckpt.render_config.model_copy(update={"stratified": False})
    fitted = psnr(render_image(ckpt.params, result.z_s, result.z_t, other_pose, other.intrinsics, eval_cfg),
                  other.image)
    mean_s, mean_t = ckpt.latents.mean_codes()
    baseline = psnr(render_image(ckpt.params, mean_s, mean_t, other_pose, other.intrinsics, eval_cfg), other.image)
    mark = "✅" if fitted >= baseline + 3.0 else "❌"
    print(f"{mark} Unseen view PSNR {fitted:.2f} dB vs mean codes {baseline:.2f} dB")


def verify_mesh():
    print("\n--- Sphere mesh ---")
    sphere = SyntheticObject(radii=(0.5, 0.5, 0.5), exponent=1.0, albedo=(0.8, 0.0, 0.0))
    grid = sample_grid(lambda x: oracle_density(sphere, x), GridSpec.cube(64))
    mesh = marching_cubes(grid, 0.5 * sphere.density_scale)
    mesh = color_vertices(mesh, oracle_radiance_fn(sphere), grid)
    chi = euler_characteristic(mesh)
    radius = mean_radius(mesh)
    color_err = float(np.max(np.abs(mesh.colors - np.array(sphere.albedo))))
    ok = chi == 2 and abs(radius - 0.5) <= 0.01 and color_err < 0.05
    mark = "✅" if ok else "❌"
    print(f"{mark} Euler characteristic {chi}, mean radius {radius:.4f} (0.5), max colour error {color_err:.3f}")


if __name__ == "__main__":
    load_dotenv()
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    verify_mesh()
    model = verify_training()
    verify_inversion(model)
