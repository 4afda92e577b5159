"""
Auto-decoder training: network weights and per-object shape/texture codes
are optimised jointly on random ray batches drawn across all training images.

Loss per batch: sum over rays of |C_hat - C|^2 plus |z_s|^2 + |z_t|^2 over
the objects in the batch, scaled by 1 / nu^2.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src import autodiff as ad
from src.autodiff import Tensor
from src.camera import Rays, generate_rays
from src.checkpoint import Checkpoint, save_checkpoint
from src.data import SceneDataset
from src.errors import CheckpointError, OptimError, ShapeError, TrainingError
from src.field import FieldConfig, init_field, init_latents
from src.metrics import json_number, psnr
from src.optim import AdamW, cosine_lr
from src.render import RenderConfig, render_rays
from src.state import TrainState

logger = logging.getLogger("DuoField.Train")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # 4094 in some descriptions; 4096 here
    rays_per_batch: int = Field(4096, ge=1)
    lr_net: float = Field(1e-4, gt=0.0)
    lr_latent: float = Field(1e-3, gt=0.0)
    nu: float = Field(100.0, gt=0.0)
    iterations: int = Field(2000, ge=0)
    epochs: Optional[int] = Field(None, ge=0)
    seed: int = 0
    weight_decay: float = Field(1e-2, ge=0.0)
    cosine_decay: bool = False
    latent_init_std: float = Field(0.01, gt=0.0)


@dataclass
class RayTable:
    """Every pixel of every training image as one ray with its target colour."""

    origins: np.ndarray     # (N, 3)
    directions: np.ndarray  # (N, 3)
    colors: np.ndarray      # (N, 3)
    objects: np.ndarray     # (N,) row into the latent tables

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    epoch_psnr: list[float] = field(default_factory=list)

    @property
    def final_psnr(self) -> Optional[float]:
        return self.epoch_psnr[-1] if self.epoch_psnr else None


def dataset_rays(dataset: SceneDataset) -> RayTable:
    origins, directions, colors, objects = [], [], [], []
    with ad.no_trace():
        for j, obj in enumerate(dataset.objects):
            for view in obj.views:
                rays = generate_rays(view.extrinsic, view.intrinsics)
                origins.append(rays.origins.data)
                directions.append(rays.directions.data)
                colors.append(view.image.reshape(-1, 3))
                objects.append(np.full(len(rays), j, dtype=np.int64))
    if not origins:
        raise TrainingError("dataset holds no views to train on")
    return RayTable(
        origins=np.concatenate(origins),
        directions=np.concatenate(directions),
        colors=np.concatenate(colors),
        objects=np.concatenate(objects),
    )


def train_loss(rendered, target, codes: Sequence[Tensor], nu: float) -> Tensor:
    """sum |rendered - target|^2 + (1 / nu^2) sum_k |z_k|^2."""
    rendered, target = ad.as_tensor(rendered), ad.as_tensor(target)
    if rendered.shape != target.shape:
        raise ShapeError("train_loss", rendered.shape, target.shape)
    loss = ad.sum_(ad.square(rendered - target))
    prior = [ad.sum_(ad.square(z)) for z in codes]
    if prior:
        total = prior[0]
        for term in prior[1:]:
            total = total + term
        loss = loss + ad.scale(total, 1.0 / (nu * nu))
    return loss


def steps_per_epoch(n_rays: int, batch: int) -> int:
    return max(1, math.ceil(n_rays / batch))


def total_iterations(cfg: TrainConfig, n_rays: int) -> int:
    if cfg.epochs is not None:
        return cfg.epochs * steps_per_epoch(n_rays, cfg.rays_per_batch)
    return cfg.iterations


def _optimizer(ckpt: Checkpoint, cfg: TrainConfig) -> AdamW:
    return AdamW({
        "network": {"params": ckpt.params.named_parameters(), "lr": cfg.lr_net,
                    "weight_decay": cfg.weight_decay},
        "latent": {"params": ckpt.latents.named_parameters(), "lr": cfg.lr_latent,
                   "weight_decay": 0.0},
    })


def initial_checkpoint(dataset: SceneDataset, field_cfg: FieldConfig, render_cfg: RenderConfig,
                       cfg: TrainConfig) -> Checkpoint:
    rng = np.random.default_rng(cfg.seed)
    params = init_field(field_cfg, rng)
    latents = init_latents(len(dataset.objects), field_cfg.latent_dim, rng, std=cfg.latent_init_std)
    K = dataset.objects[0].views[0].intrinsics
    return Checkpoint(
        field_config=field_cfg,
        render_config=render_cfg,
        params=params,
        latents=latents,
        object_ids=dataset.object_ids,
        step=0,
        metadata={
            "train_config": cfg.model_dump(mode="json"),
            "dataset": dataset.meta.model_dump(mode="json", exclude={"objects"}),
            "intrinsics": asdict(K),
        },
    )


def _snapshot(ckpt: Checkpoint, optimizer: AdamW, directory: Path, step: int) -> str:
    path = directory / f"nan_snapshot_step{step:06d}.ckpt"
    ckpt.step = step
    ckpt.optimizer_state = optimizer.state_arrays()
    save_checkpoint(ckpt, path)
    return str(path)


def train(dataset: SceneDataset, field_cfg: FieldConfig, render_cfg: RenderConfig, cfg: TrainConfig,
          log_path: Optional[Union[str, Path]] = None, resume: Optional[Checkpoint] = None,
          state: Optional[TrainState] = None, snapshot_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Run until the checkpoint's step reaches the configured total. Batch
    selection and jitter at step s come from default_rng([seed, s]), so a
    resumed run reproduces an uninterrupted one.
    """
    state = state or TrainState()
    table = dataset_rays(dataset)
    total = total_iterations(cfg, len(table))
    per_epoch = steps_per_epoch(len(table), cfg.rays_per_batch)

    if resume is not None:
        if resume.object_ids != dataset.object_ids:
            raise CheckpointError("checkpoint objects do not match the dataset being trained")
        ckpt = resume
        ckpt.render_config = render_cfg
    else:
        ckpt = initial_checkpoint(dataset, field_cfg, render_cfg, cfg)
    optimizer = _optimizer(ckpt, cfg)
    if resume is not None and resume.optimizer_state:
        optimizer.load_state_arrays(resume.optimizer_state)

    snapshot_root = Path(snapshot_dir) if snapshot_dir else (Path(log_path).parent if log_path else Path("."))
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if resume is not None else "w")

    result = TrainResult(checkpoint=ckpt)
    epoch_values: list[float] = []
    batch = min(cfg.rays_per_batch, len(table))
    state.running, state.total_steps = True, total
    start_time = time.monotonic()
    logger.info(f"Training {len(dataset.objects)} objects on {len(table)} rays: "
                f"steps {ckpt.step} -> {total}, batch {batch}")
    try:
        for step in range(ckpt.step, total):
            if cfg.cosine_decay:
                optimizer.set_lr("network", cosine_lr(cfg.lr_net, step, total))
                optimizer.set_lr("latent", cosine_lr(cfg.lr_latent, step, total))
            rng = np.random.default_rng([cfg.seed, step])
            idx = np.sort(rng.choice(len(table), size=batch, replace=False))
            rays = Rays(ad.constant(table.origins[idx]), ad.constant(table.directions[idx]))
            target = table.colors[idx]
            rows = table.objects[idx]
            present = np.unique(rows)

            optimizer.zero_grad()
            with ad.Trace() as tape:
                z_s, z_t = ckpt.latents.codes(rows)
                rendered = render_rays(ckpt.params, z_s, z_t, rays, render_cfg, rng)
                prior_s, prior_t = ckpt.latents.codes(present)
                loss = train_loss(rendered.rgb, target, [prior_s, prior_t], cfg.nu)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                path = _snapshot(ckpt, optimizer, snapshot_root, step)
                raise TrainingError(f"loss became {loss_value} at step {step}", snapshot=path)
            tape.backward(loss)
            try:
                optimizer.step()
            except OptimError as e:
                path = _snapshot(ckpt, optimizer, snapshot_root, step)
                raise TrainingError(f"step {step}: {e.message}", snapshot=path) from None

            ckpt.step = step + 1
            batch_psnr = psnr(rendered.rgb.data, target)
            record = {
                "iteration": step,
                "loss": loss_value,
                "psnr": json_number(batch_psnr),
                "lr_net": optimizer.states["network"].lr,
                "wall_time": time.monotonic() - start_time,
            }
            result.history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            state.step, state.loss, state.batch_psnr = ckpt.step, loss_value, batch_psnr
            logger.debug(f"step {step}: loss {loss_value:.6f}, psnr {batch_psnr:.2f} dB")

            epoch_values.append(min(batch_psnr, 99.0))
            if ckpt.step % per_epoch == 0 or ckpt.step == total:
                epoch_psnr = float(np.mean(epoch_values))
                result.epoch_psnr.append(epoch_psnr)
                state.epoch_psnr.append(epoch_psnr)
                state.epoch = ckpt.step // per_epoch
                logger.info(f"epoch {state.epoch}: train PSNR {epoch_psnr:.2f} dB (step {ckpt.step})")
                epoch_values = []
    except Exception as e:
        logger.error(f"Training stopped: {e}")
        state.error = str(e)
        raise
    finally:
        state.running = False
        if log_file is not None:
            log_file.close()

    ckpt.optimizer_state = optimizer.state_arrays()
    return result
