"""
Synthetic superellipsoid scenes with an analytic density/colour oracle,
and the SRN-style posed-image layout (export and load).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from src.camera import (
    CameraPose,
    Extrinsic,
    Intrinsics,
    read_pose_file,
    rotation_from_pose,
    write_pose_file,
)
from src.errors import CameraError, DatasetError
from src.render import RenderConfig, load_png, render_oracle, save_png
from src.runner import map_chunks

logger = logging.getLogger("DuoField.Data")

SIDECAR = "dataset.json"

# Sampling ranges for random objects
_RADIUS_RANGE = (0.45, 0.8)
_EXPONENT_RANGE = (0.5, 1.5)
_ALBEDO_RANGE = (0.15, 0.9)
_GRADIENT_RANGE = (-0.3, 0.3)
_ELEVATION_DEG = (5.0, 45.0)


@dataclass(frozen=True)
class SyntheticObject:
    """Smooth superellipsoid with albedo varying linearly along world z."""

    radii: tuple[float, float, float]
    exponent: float
    albedo: tuple[float, float, float]
    gradient: tuple[float, float, float] = (0.0, 0.0, 0.0)
    density_scale: float = 10.0
    sharpness: float = 8.0

    def __post_init__(self) -> None:
        if min(self.radii) <= 0.0:
            raise DatasetError(f"superellipsoid radii must be positive, got {self.radii}")
        if self.exponent <= 0.0:
            raise DatasetError(f"superellipsoid exponent must be positive, got {self.exponent}")
        if min(self.albedo) < 0.0 or max(self.albedo) > 1.0:
            raise DatasetError(f"albedo must lie in [0, 1], got {self.albedo}")
        if self.density_scale <= 0.0 or self.sharpness <= 0.0:
            raise DatasetError("density_scale and sharpness must be positive")

    def to_dict(self) -> dict:
        return {
            "radii": list(self.radii),
            "exponent": self.exponent,
            "albedo": list(self.albedo),
            "gradient": list(self.gradient),
            "density_scale": self.density_scale,
            "sharpness": self.sharpness,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticObject":
        return cls(
            radii=tuple(raw["radii"]),
            exponent=raw["exponent"],
            albedo=tuple(raw["albedo"]),
            gradient=tuple(raw.get("gradient", (0.0, 0.0, 0.0))),
            density_scale=raw.get("density_scale", 10.0),
            sharpness=raw.get("sharpness", 8.0),
        )


def superellipsoid_radius(obj: SyntheticObject, x: np.ndarray) -> np.ndarray:
    """Implicit radius r(x) = (sum |x_i / a_i|^(2/e))^(e/2); the surface is r = 1."""
    x = np.asarray(x, dtype=np.float64)
    scaled = np.abs(x / np.asarray(obj.radii))
    power = 2.0 / obj.exponent
    return np.sum(scaled ** power, axis=-1) ** (obj.exponent / 2.0)


def oracle_density(obj: SyntheticObject, x: np.ndarray) -> np.ndarray:
    r = superellipsoid_radius(obj, x)
    k = obj.sharpness
    return obj.density_scale * expit(k * (1.0 - r)) / expit(k)


def oracle_density_color(obj: SyntheticObject, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    sigma = density_scale at the centre, half of it on the surface, decaying
    like exp(-k (r - 1)) outside. Colour ignores d.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = oracle_density(obj, x)
    rgb = np.asarray(obj.albedo) + np.asarray(obj.gradient) * x[..., 2:3]
    return sigma, np.clip(rgb, 0.0, 1.0)


def oracle_radiance_fn(obj: SyntheticObject):
    def radiance(x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return oracle_density_color(obj, x, d)
    return radiance


def sample_object(rng: np.random.Generator) -> SyntheticObject:
    return SyntheticObject(
        radii=tuple(float(v) for v in rng.uniform(*_RADIUS_RANGE, size=3)),
        exponent=float(rng.uniform(*_EXPONENT_RANGE)),
        albedo=tuple(float(v) for v in rng.uniform(*_ALBEDO_RANGE, size=3)),
        gradient=tuple(float(v) for v in rng.uniform(*_GRADIENT_RANGE, size=3)),
    )


class DatasetMeta(BaseModel):
    """Contents of the dataset.json sidecar."""

    model_config = ConfigDict(extra="forbid")

    scene_radius: float = Field(1.0, gt=0.0)
    rho: float = Field(2.5, gt=0.0)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    split: str = "train"
    objects: dict[str, dict] = Field(default_factory=dict)

    @property
    def near(self) -> float:
        return max(self.rho - 1.5 * self.scene_radius, 1e-3)

    @property
    def far(self) -> float:
        return self.rho + 1.5 * self.scene_radius

    @property
    def white_background(self) -> bool:
        return all(c >= 1.0 for c in self.background)

    def render_config(self, n_samples: int = 64, **overrides) -> RenderConfig:
        return RenderConfig(
            n_samples=n_samples, near=self.near, far=self.far,
            white_background=self.white_background, **overrides,
        )


@dataclass
class View:
    image: np.ndarray      # (H, W, 3) in [0, 1]
    c2w: np.ndarray        # (4, 4)
    intrinsics: Intrinsics

    @property
    def extrinsic(self) -> Extrinsic:
        return Extrinsic.from_c2w(self.c2w)


@dataclass
class ObjectViews:
    object_id: str
    views: list[View]
    source: Optional[SyntheticObject] = None


@dataclass
class SceneDataset:
    objects: list[ObjectViews]
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self) -> None:
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"object ids are not unique: {ids}")
        shapes = {v.image.shape for o in self.objects for v in o.views}
        if len(shapes) > 1:
            raise DatasetError(f"images differ in size: {sorted(shapes)}")
        for o in self.objects:
            for i, v in enumerate(o.views):
                try:
                    Extrinsic.from_c2w(v.c2w)
                except CameraError as e:
                    raise DatasetError(f"{o.object_id} view {i}: {e.message}") from None

    @property
    def object_ids(self) -> list[str]:
        return [o.object_id for o in self.objects]

    @property
    def split(self) -> str:
        return self.meta.split

    @property
    def image_shape(self) -> tuple[int, int]:
        for o in self.objects:
            for v in o.views:
                return v.image.shape[:2]
        raise DatasetError("dataset holds no views")

    def __len__(self) -> int:
        return sum(len(o.views) for o in self.objects)

    def mean_rho(self) -> float:
        centres = [np.linalg.norm(v.c2w[:3, 3]) for o in self.objects for v in o.views]
        return float(np.mean(centres)) if centres else self.meta.rho


def sample_poses(n_views: int, rho: float, rng: np.random.Generator) -> list[CameraPose]:
    """phi ~ U[0, 2pi), theta ~ U[5deg, 45deg], fixed rho."""
    phis = rng.uniform(0.0, 2.0 * math.pi, size=n_views)
    thetas = np.radians(rng.uniform(*_ELEVATION_DEG, size=n_views))
    return [CameraPose(float(p), float(t), rho) for p, t in zip(phis, thetas)]


def render_views(obj: SyntheticObject, poses: list[CameraPose], K: Intrinsics, cfg: RenderConfig,
                 threads: Optional[int] = None) -> list[View]:
    """Oracle renders of `obj`, one per pose, produced in parallel over views."""
    radiance = oracle_radiance_fn(obj)

    def one(start: int, stop: int) -> View:
        ext = rotation_from_pose(poses[start])
        image = render_oracle(radiance, ext, K, cfg, threads=1)
        return View(image=image, c2w=ext.c2w, intrinsics=K)

    return map_chunks(one, len(poses), 1, threads)


def generate_dataset(n_objects: int, n_views: int, image_size: int, seed: int,
                     fov_deg: float = 45.0, rho: float = 2.5, oracle_samples: int = 512,
                     white_background: bool = False, split: str = "train",
                     threads: Optional[int] = None) -> SceneDataset:
    """Random superellipsoids rendered from the upper hemisphere; deterministic per seed."""
    if n_objects < 1 or n_views < 1 or image_size < 1:
        raise DatasetError(
            f"counts must be positive: objects={n_objects}, views={n_views}, size={image_size}"
        )
    if oracle_samples < 256:
        logger.warning(f"oracle uses {oracle_samples} samples per ray; references may not be converged")
    rng = np.random.default_rng(seed)
    meta = DatasetMeta(
        scene_radius=1.0, rho=rho, split=split,
        background=(1.0, 1.0, 1.0) if white_background else (0.0, 0.0, 0.0),
    )
    cfg = RenderConfig(n_samples=oracle_samples, near=meta.near, far=meta.far,
                       stratified=False, white_background=white_background)
    K = Intrinsics.from_fov(image_size, fov_deg)

    objects = []
    for j in range(n_objects):
        obj = sample_object(rng)
        poses = sample_poses(n_views, rho, rng)
        object_id = f"obj_{j:04d}"
        objects.append(ObjectViews(object_id, render_views(obj, poses, K, cfg, threads), obj))
        meta.objects[object_id] = obj.to_dict()
        logger.debug(f"Rendered {n_views} views of {object_id}")
    logger.info(f"Generated {n_objects} objects x {n_views} views at {image_size}x{image_size} (seed {seed})")
    return SceneDataset(objects, meta)


def held_out_views(dataset: SceneDataset, n_views: int, seed: int, oracle_samples: int = 512,
                   threads: Optional[int] = None) -> SceneDataset:
    """Fresh oracle views of the same synthetic objects, tagged as the test split."""
    rng = np.random.default_rng(seed)
    objects = []
    for o in dataset.objects:
        if o.source is None:
            raise DatasetError(f"{o.object_id}: no synthetic source to render new views from")
        K = o.views[0].intrinsics
        cfg = dataset.meta.render_config(oracle_samples, stratified=False)
        poses = sample_poses(n_views, dataset.meta.rho, rng)
        objects.append(ObjectViews(o.object_id, render_views(o.source, poses, K, cfg, threads), o.source))
    return SceneDataset(objects, dataset.meta.model_copy(update={"split": "test"}))


# ---- SRN layout ----

def _format_intrinsics(K: Intrinsics) -> str:
    return f"{K.fx:.17g} {K.cx:.17g} {K.cy:.17g} 0.\n0. 0. 0.\n1.\n{K.height} {K.width}\n"


def _parse_intrinsics(path: Path) -> Intrinsics:
    try:
        lines = [line.split() for line in path.read_text().splitlines() if line.strip()]
        focal, cx, cy = (float(v) for v in lines[0][:3])
        height, width = (int(float(v)) for v in lines[-1][:2])
    except (OSError, ValueError, IndexError) as e:
        raise DatasetError(f"{path}: unreadable intrinsics ({e})") from None
    try:
        return Intrinsics(focal, focal, cx, cy, width, height)
    except CameraError as e:
        raise DatasetError(f"{path}: {e.message}") from None


def export_srn_dataset(dataset: SceneDataset, root: Union[str, Path]) -> Path:
    """<root>/<object>/{rgb/NNNNNN.png, pose/NNNNNN.txt, intrinsics.txt} plus dataset.json."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {root}: {e}") from None
    for o in dataset.objects:
        base = root / o.object_id
        (base / "rgb").mkdir(parents=True, exist_ok=True)
        (base / "pose").mkdir(parents=True, exist_ok=True)
        for i, view in enumerate(o.views):
            save_png(base / "rgb" / f"{i:06d}.png", view.image)
            write_pose_file(base / "pose" / f"{i:06d}.txt", view.c2w)
        (base / "intrinsics.txt").write_text(_format_intrinsics(o.views[0].intrinsics))
    sidecar = dataset.meta.model_dump(mode="json")
    (root / SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    logger.info(f"Exported {len(dataset.objects)} objects to {root}")
    return root


def _opencv_to_opengl(c2w: np.ndarray) -> np.ndarray:
    out = c2w.copy()
    out[:3, 1:3] *= -1.0
    return out


def load_srn_dataset(root: Union[str, Path], opencv_poses: bool = False) -> SceneDataset:
    """
    Parse an SRN-style directory. Poses are validated as rigid; images come back in [0, 1].
    With opencv_poses the camera axes are converted from the OpenCV convention.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    sidecar = root / SIDECAR
    meta = DatasetMeta.model_validate_json(sidecar.read_text()) if sidecar.exists() else None

    objects = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        rgb_files = sorted((folder / "rgb").glob("*.png"))
        pose_files = sorted((folder / "pose").glob("*.txt"))
        if not (folder / "intrinsics.txt").exists():
            raise DatasetError(f"{folder.name}: missing intrinsics.txt")
        if len(rgb_files) != len(pose_files) or not rgb_files:
            raise DatasetError(
                f"{folder.name}: {len(pose_files)} poses but {len(rgb_files)} images"
            )
        K = _parse_intrinsics(folder / "intrinsics.txt")
        views = []
        for rgb_path, pose_path in zip(rgb_files, pose_files):
            try:
                c2w = read_pose_file(pose_path)
            except CameraError as e:
                raise DatasetError(e.message) from None
            if opencv_poses:
                c2w = _opencv_to_opengl(c2w)
            try:
                Extrinsic.from_c2w(c2w)
            except CameraError:
                raise DatasetError(f"{folder.name}: {pose_path.name} is not a rigid pose:\n{c2w}") from None
            image = load_png(rgb_path)
            if image.shape[:2] != (K.height, K.width):
                raise DatasetError(
                    f"{folder.name}: {rgb_path.name} is {image.shape[1]}x{image.shape[0]}, "
                    f"intrinsics say {K.width}x{K.height}"
                )
            views.append(View(image=image, c2w=c2w, intrinsics=K))
        source = None
        if meta is not None and folder.name in meta.objects:
            source = SyntheticObject.from_dict(meta.objects[folder.name])
        objects.append(ObjectViews(folder.name, views, source))

    if not objects:
        raise DatasetError(f"{root}: no object folders found")
    dataset = SceneDataset(objects, meta or DatasetMeta())
    if meta is None:
        dataset.meta.rho = dataset.mean_rho()
    logger.info(f"Loaded {len(objects)} objects ({len(dataset)} views) from {root}")
    return dataset
