"""
Test-time inversion: with the network frozen, optimise the shape and
texture codes (and optionally the camera's azimuth, elevation and distance)
so that renders reproduce one or more observed images.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src import autodiff as ad
from src.autodiff import Tensor
from src.camera import POLE_MARGIN, CameraPose, Intrinsics, generate_rays, pixel_grid
from src.checkpoint import Checkpoint
from src.errors import OptimError
from src.optim import AdamW
from src.render import render_image, render_rays
from src.state import InversionState

logger = logging.getLogger("DuoField.Inference")

THETA_LIMIT = math.pi / 2 - POLE_MARGIN


class InferConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr_code: float = Field(1e-2, gt=0.0)
    lr_phi: float = Field(1e-2, gt=0.0)
    lr_theta: float = Field(1e-1, gt=0.0)
    lr_rho: float = Field(1e-1, gt=0.0)
    iterations: int = Field(299, ge=1)
    # (phi, theta, rho); sampled when absent
    init_pose: Optional[tuple[float, float, float]] = None
    seed: int = 0
    # None disables the latent prior
    nu: Optional[float] = Field(100.0, gt=0.0)
    optimize_pose: bool = True
    # None renders every pixel each step
    rays_per_step: Optional[int] = Field(None, ge=1)
    jitter: bool = False
    snapshot_iters: tuple[int, ...] = (0, 5, 10, 50)
    divergence_factor: float = Field(10.0, gt=1.0)
    divergence_patience: int = Field(50, ge=1)


@dataclass
class InversionResult:
    z_s: np.ndarray
    z_t: np.ndarray
    poses: list[CameraPose]
    losses: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)
    snapshots: dict[str, np.ndarray] = field(default_factory=dict)
    diverged: bool = False

    @property
    def pose(self) -> CameraPose:
        return self.poses[0]

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict:
        return {
            "z_s": self.z_s.tolist(),
            "z_t": self.z_t.tolist(),
            "poses": [p.to_dict() for p in self.poses],
            "losses": self.losses,
            "diverged": self.diverged,
            "iterations": self.iterations,
        }


def interpolate_codes(a, b, alpha: float) -> np.ndarray:
    """(1 - alpha) a + alpha b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise OptimError(f"cannot interpolate codes of shapes {a.shape} and {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise OptimError(f"interpolation weight must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * a + alpha * b


def sample_init_pose(rng: np.random.Generator, rho: float) -> CameraPose:
    """phi ~ U[0, 2pi), theta ~ U[0deg, 45deg], rho fixed."""
    return CameraPose(
        float(rng.uniform(0.0, 2.0 * math.pi)),
        float(math.radians(rng.uniform(0.0, 45.0))),
        rho,
    )


def dataset_rho(ckpt: Checkpoint) -> float:
    return float(ckpt.metadata.get("dataset", {}).get("rho", 2.5))


class _PoseLeaves:
    """phi, theta and log(rho) as scalar leaves; constants when the pose is frozen."""

    def __init__(self, pose: CameraPose, trainable: bool, index: int) -> None:
        phi, theta, rho = pose.values()
        make = ad.parameter if trainable else ad.constant
        self.phi = make(phi)
        self.theta = make(min(max(theta, -THETA_LIMIT), THETA_LIMIT))
        self.log_rho = make(math.log(rho))
        if trainable:
            self.phi.name, self.theta.name, self.log_rho.name = (
                f"view{index}.phi", f"view{index}.theta", f"view{index}.log_rho")

    def pose(self) -> CameraPose:
        return CameraPose(self.phi, self.theta, ad.exp(self.log_rho))

    def clamp(self) -> None:
        np.clip(self.theta.data, -THETA_LIMIT, THETA_LIMIT, out=self.theta.data)

    def value(self) -> CameraPose:
        return CameraPose(self.phi.item(), self.theta.item(), math.exp(self.log_rho.item())).canonical()


def invert_views(images: Sequence[np.ndarray], intrinsics: Sequence[Intrinsics], ckpt: Checkpoint,
                 cfg: InferConfig, init_poses: Optional[Sequence[CameraPose]] = None,
                 init_codes: Optional[tuple[np.ndarray, np.ndarray]] = None,
                 state: Optional[InversionState] = None,
                 log_path: Optional[Union[str, Path]] = None) -> InversionResult:
    """
    Shared codes, one pose per view. The loss is the photometric error summed
    over all views plus the latent prior. The checkpoint is never modified.
    """
    if len(images) != len(intrinsics) or not images:
        raise OptimError(f"got {len(images)} images for {len(intrinsics)} intrinsics")
    for image, K in zip(images, intrinsics):
        if image.shape != (K.height, K.width, 3):
            raise OptimError(f"image {image.shape} does not match intrinsics {K.width}x{K.height}")
    state = state or InversionState()
    rng = np.random.default_rng(cfg.seed)
    params = ckpt.params.frozen()
    render_cfg = ckpt.render_config.model_copy(update={"stratified": cfg.jitter})

    if init_poses is None:
        if cfg.init_pose is not None:
            init_poses = [CameraPose(*cfg.init_pose)] * len(images)
        else:
            init_poses = [sample_init_pose(rng, dataset_rho(ckpt)) for _ in images]
    leaves = [_PoseLeaves(p, cfg.optimize_pose, i) for i, p in enumerate(init_poses)]

    mean_s, mean_t = ckpt.latents.mean_codes() if init_codes is None else init_codes
    z_s = ad.parameter(np.array(mean_s, dtype=np.float64), name="z_s")
    z_t = ad.parameter(np.array(mean_t, dtype=np.float64), name="z_t")

    groups = {"codes": {"params": {"z_s": z_s, "z_t": z_t}, "lr": cfg.lr_code}}
    if cfg.optimize_pose:
        groups["phi"] = {"params": {l.phi.name: l.phi for l in leaves}, "lr": cfg.lr_phi}
        groups["theta"] = {"params": {l.theta.name: l.theta for l in leaves}, "lr": cfg.lr_theta}
        groups["rho"] = {"params": {l.log_rho.name: l.log_rho for l in leaves}, "lr": cfg.lr_rho}
    optimizer = AdamW(groups)

    targets = [img.reshape(-1, 3) for img in images]
    result = InversionResult(z_s=z_s.data, z_t=z_t.data, poses=[])
    log_file = open(log_path, "w") if log_path is not None else None
    start_time = time.monotonic()
    above, initial = 0, None
    state.running = True

    def snapshot(key: str) -> None:
        result.snapshots[key] = render_image(params, z_s.data, z_t.data, leaves[0].value(),
                                             intrinsics[0], render_cfg)

    try:
        for it in range(cfg.iterations):
            if it in cfg.snapshot_iters:
                snapshot(str(it))
            optimizer.zero_grad()
            with ad.Trace() as tape:
                loss = None
                for leaf, K, target in zip(leaves, intrinsics, targets):
                    pixels = None
                    if cfg.rays_per_step is not None and cfg.rays_per_step < len(target):
                        pick = np.sort(rng.choice(len(target), size=cfg.rays_per_step, replace=False))
                        pixels = pixel_grid(K)[pick]
                        target = target[pick]
                    rays = generate_rays(leaf.pose(), K, pixels)
                    rendered = render_rays(params, z_s, z_t, rays, render_cfg, rng if cfg.jitter else None)
                    term = ad.sum_(ad.square(rendered.rgb - target))
                    loss = term if loss is None else loss + term
                if cfg.nu is not None:
                    prior = ad.sum_(ad.square(z_s)) + ad.sum_(ad.square(z_t))
                    loss = loss + ad.scale(prior, 1.0 / (cfg.nu * cfg.nu))
            value = loss.item()
            if not math.isfinite(value):
                raise OptimError(f"inversion loss became {value} at iteration {it}")
            tape.backward(loss)
            optimizer.step()
            for leaf in leaves:
                leaf.clamp()

            result.losses.append(value)
            best = value if not result.smoothed else min(result.smoothed[-1], value)
            result.smoothed.append(best)
            current = leaves[0].value()
            state.iteration, state.loss, state.best_loss, state.pose = it + 1, value, best, current.to_dict()
            if log_file is not None:
                log_file.write(json.dumps({
                    "iteration": it, "loss": value, **current.to_dict(),
                    "wall_time": time.monotonic() - start_time,
                }) + "\n")
            logger.debug(f"iteration {it}: loss {value:.6f}, pose {current.to_dict()}")

            initial = value if initial is None else initial
            above = above + 1 if value > cfg.divergence_factor * initial else 0
            if above >= cfg.divergence_patience:
                result.diverged = state.diverged = True
                logger.warning(f"Inversion diverged at iteration {it}: loss {value:.4g} vs initial {initial:.4g}")
                break
    except Exception as e:
        logger.error(f"Inversion stopped: {e}")
        state.error = str(e)
        raise
    finally:
        state.running = False
        if log_file is not None:
            log_file.close()

    snapshot("final")
    result.z_s, result.z_t = z_s.data.copy(), z_t.data.copy()
    result.poses = [leaf.value() for leaf in leaves]
    logger.info(f"Inversion finished after {result.iterations} iterations: loss "
                f"{result.losses[0]:.4g} -> {result.losses[-1]:.4g}")
    return result


def invert(image: np.ndarray, K: Intrinsics, ckpt: Checkpoint, cfg: InferConfig,
           init_pose: Optional[CameraPose] = None,
           init_codes: Optional[tuple[np.ndarray, np.ndarray]] = None,
           state: Optional[InversionState] = None,
           log_path: Optional[Union[str, Path]] = None) -> InversionResult:
    """Single-view inversion."""
    return invert_views([image], [K], ckpt, cfg,
                        init_poses=None if init_pose is None else [init_pose],
                        init_codes=init_codes, state=state, log_path=log_path)
