"""
Differentiable volume rendering.

Points are sampled along rays, the field is queried, and colours are
alpha-composited with weights T_i (1 - exp(-sigma_i delta_i)).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import imageio.v2 as imageio
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src import autodiff as ad
from src.autodiff import Tensor
from src.camera import CameraPose, Extrinsic, Intrinsics, Rays, generate_rays
from src.errors import RenderError
from src.field import FieldParams, RadianceFn, eval_field
from src.runner import map_chunks

logger = logging.getLogger("DuoField.Render")


class RenderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_samples: int = Field(64, ge=2)
    near: float = Field(1.0, gt=0.0)
    far: float = Field(4.0, gt=0.0)
    stratified: bool = True
    white_background: bool = False
    importance_samples: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _bounds(self) -> "RenderConfig":
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be below far ({self.far})")
        return self


@dataclass
class RenderResult:
    rgb: Tensor            # (R, 3)
    weights: Tensor        # (R, N)
    transmittance: Tensor  # (R,) after the last sample
    ts: Tensor             # (R, N)


def sample_points(origins, directions, cfg: RenderConfig,
                  rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, Tensor]:
    """
    n_samples depths per ray on [near, far). Left bin edges, or a uniform
    jitter inside each bin when cfg.stratified and an rng is given.
    """
    origins, directions = ad.as_tensor(origins), ad.as_tensor(directions)
    n_rays, n = origins.shape[0], cfg.n_samples
    step = (cfg.far - cfg.near) / n
    offsets = np.arange(n, dtype=np.float64)
    if cfg.stratified and rng is not None:
        offsets = offsets + rng.random((n_rays, n))
    ts = np.broadcast_to(cfg.near + step * offsets, (n_rays, n)).copy()
    return ts, points_along(origins, directions, ts)


def points_along(origins, directions, ts: np.ndarray) -> Tensor:
    """origin + t * direction for every depth; (R, N, 3)."""
    n_rays = origins.shape[0]
    o = ad.reshape(origins, (n_rays, 1, 3))
    d = ad.reshape(directions, (n_rays, 1, 3))
    return o + ad.constant(ts[..., None]) * d


def _exclusive_cumsum_matrix(n: int) -> np.ndarray:
    # column i sums entries j < i
    return np.triu(np.ones((n, n)), k=1)


def composite(sigmas, colors, ts, cfg: RenderConfig) -> RenderResult:
    """
    C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i with T_1 = 1,
    delta_i = t_{i+1} - t_i and delta_N = far - t_N.
    """
    sigmas, colors, ts = ad.as_tensor(sigmas), ad.as_tensor(colors), ad.as_tensor(ts)
    if sigmas.ndim != 2 or ts.shape != sigmas.shape or colors.shape != sigmas.shape + (3,):
        raise RenderError(
            f"composite: sigmas {sigmas.shape}, colors {colors.shape}, ts {ts.shape} do not line up"
        )
    n_rays, n = sigmas.shape
    if n < 2:
        raise RenderError(f"composite needs at least 2 samples per ray, got {n}")
    if np.any(sigmas.data < 0.0):
        raise RenderError("composite: negative density")

    deltas = ad.concat([ts[:, 1:] - ts[:, :-1], cfg.far - ts[:, -1:]], axis=1)
    tau = sigmas * deltas
    transmittance = ad.exp(-(tau @ ad.constant(_exclusive_cumsum_matrix(n))))
    alpha = 1.0 - ad.exp(-tau)
    weights = transmittance * alpha
    rgb = ad.sum_(ad.reshape(weights, (n_rays, n, 1)) * colors, axis=1)
    final = ad.exp(-ad.sum_(tau, axis=1))
    if cfg.white_background:
        rgb = rgb + ad.reshape(final, (n_rays, 1))
    return RenderResult(rgb=rgb, weights=weights, transmittance=final, ts=ts)


def importance_resample(weights: np.ndarray, ts: np.ndarray, n_extra: int, far: float,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Inverse-CDF samples from the piecewise-constant distribution of `weights`
    over bins [t_i, t_{i+1}) (last bin ends at far), merged and sorted with ts.
    Without an rng the quantiles are evenly spaced.
    """
    if n_extra < 1:
        raise RenderError(f"importance_resample needs n_extra >= 1, got {n_extra}")
    weights = np.asarray(weights, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    n_rays, n = ts.shape
    edges = np.concatenate([ts, np.full((n_rays, 1), far)], axis=1)

    totals = weights.sum(axis=1, keepdims=True)
    empty = totals[:, 0] <= 0.0
    pdf = np.where(empty[:, None], 1.0 / n, weights / np.where(totals > 0.0, totals, 1.0))
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_extra) + 0.5) / n_extra, (n_rays, n_extra))
    else:
        u = rng.random((n_rays, n_extra))
    bins = np.empty((n_rays, n_extra), dtype=np.int64)
    for r in range(n_rays):
        bins[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    bins = np.clip(bins, 0, n - 1)

    rows = np.arange(n_rays)[:, None]
    lo_cdf, width = cdf[rows, bins], pdf[rows, bins]
    frac = np.where(width > 0.0, (u - lo_cdf) / np.where(width > 0.0, width, 1.0), 0.0)
    lo, hi = edges[rows, bins], edges[rows, bins + 1]
    fresh = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    return np.sort(np.concatenate([ts, np.minimum(fresh, far)], axis=1), axis=1)


def _expand_codes(z, n_rays: int, n: int):
    """Per-ray codes (R, D) become per-point codes (R*N, D); a shared (D,) code passes through."""
    z = ad.as_tensor(z)
    if z.ndim == 1:
        return z
    dim = z.shape[1]
    return ad.reshape(ad.broadcast_to(ad.reshape(z, (n_rays, 1, dim)), (n_rays, n, dim)), (n_rays * n, dim))


def _shade(params: FieldParams, z_s, z_t, rays: Rays, ts: np.ndarray, cfg: RenderConfig) -> RenderResult:
    n_rays, n = ts.shape
    points = points_along(rays.origins, rays.directions, ts)
    dirs = ad.broadcast_to(ad.reshape(rays.directions, (n_rays, 1, 3)), (n_rays, n, 3))
    out = eval_field(
        params,
        _expand_codes(z_s, n_rays, n),
        _expand_codes(z_t, n_rays, n),
        ad.reshape(points, (n_rays * n, 3)),
        ad.reshape(dirs, (n_rays * n, 3)),
    )
    return composite(
        ad.reshape(out.sigma, (n_rays, n)),
        ad.reshape(out.rgb, (n_rays, n, 3)),
        ad.constant(ts),
        cfg,
    )


def render_rays(params: FieldParams, z_s, z_t, rays: Rays, cfg: RenderConfig,
                rng: Optional[np.random.Generator] = None) -> RenderResult:
    """Render a ray batch through the field; differentiable in codes, weights and rays."""
    ts, _ = sample_points(rays.origins, rays.directions, cfg, rng)
    if cfg.importance_samples:
        with ad.no_trace():
            coarse = _shade(params, z_s, z_t, rays, ts, cfg)
        ts = importance_resample(coarse.weights.data, ts, cfg.importance_samples, cfg.far, rng)
    return _shade(params, z_s, z_t, rays, ts, cfg)


def render_image(params: FieldParams, z_s, z_t, camera: Union[CameraPose, Extrinsic],
                 K: Intrinsics, cfg: RenderConfig, chunk_size: int = 4096,
                 threads: Optional[int] = None) -> np.ndarray:
    """H x W x 3 image in [0, 1]. Deterministic sampling; chunking does not change results."""
    z_s = np.asarray(z_s.data if isinstance(z_s, Tensor) else z_s, dtype=np.float64)
    z_t = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=np.float64)
    with ad.no_trace():
        rays = generate_rays(_plain(camera), K)
    origins, directions = rays.origins.data, rays.directions.data

    def run(start: int, stop: int) -> np.ndarray:
        with ad.no_trace():
            chunk = Rays(ad.constant(origins[start:stop]), ad.constant(directions[start:stop]))
            return render_rays(params, z_s, z_t, chunk, cfg, rng=None).rgb.data

    rgb = np.concatenate(map_chunks(run, len(origins), chunk_size, threads), axis=0)
    return np.clip(rgb, 0.0, 1.0).reshape(K.height, K.width, 3)


def render_oracle(radiance: RadianceFn, camera: Union[CameraPose, Extrinsic], K: Intrinsics,
                  cfg: RenderConfig, chunk_size: int = 1024, threads: Optional[int] = None) -> np.ndarray:
    """
    Reference image of an analytic field. Density and colour are taken at
    interval midpoints, which keeps the quadrature second-order accurate.
    """
    with ad.no_trace():
        rays = generate_rays(_plain(camera), K)
    origins, directions = rays.origins.data, rays.directions.data

    def run(start: int, stop: int) -> np.ndarray:
        return composite_radiance(radiance, origins[start:stop], directions[start:stop], cfg)[0]

    rgb = np.concatenate(map_chunks(run, len(origins), chunk_size, threads), axis=0)
    return np.clip(rgb, 0.0, 1.0).reshape(K.height, K.width, 3)


def composite_radiance(radiance: RadianceFn, origins: np.ndarray, directions: np.ndarray,
                       cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint-rule render of plain numpy rays; returns (rgb, final transmittance)."""
    step = (cfg.far - cfg.near) / cfg.n_samples
    ts, _ = sample_points(origins, directions, cfg.model_copy(update={"stratified": False}))
    mids = ts + 0.5 * step
    points = origins[:, None, :] + mids[..., None] * directions[:, None, :]
    dirs = np.broadcast_to(directions[:, None, :], points.shape)
    sigma, rgb = radiance(points.reshape(-1, 3), dirs.reshape(-1, 3))
    n_rays, n = ts.shape
    with ad.no_trace():
        out = composite(np.reshape(sigma, (n_rays, n)), np.reshape(rgb, (n_rays, n, 3)), ts, cfg)
    return out.rgb.data, out.transmittance.data


def _plain(camera: Union[CameraPose, Extrinsic]) -> Union[CameraPose, Extrinsic]:
    if isinstance(camera, CameraPose):
        return CameraPose(*camera.values())
    return camera


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: Union[str, Path], image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    imageio.imwrite(path, to_uint8(image))


def load_png(path: Union[str, Path]) -> np.ndarray:
    image = np.asarray(imageio.imread(path))
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    return image[..., :3].astype(np.float64) / 255.0
