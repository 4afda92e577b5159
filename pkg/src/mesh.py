"""
Explicit geometry: density sampled at voxel centres, polygonised with
marching cubes, vertices coloured by rays cast inward along their normals.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import trimesh
from scipy.ndimage import map_coordinates
from skimage import measure
from skimage.filters import threshold_otsu

from src.errors import MeshError
from src.field import DensityFn, FieldParams, RadianceFn, field_density_fn
from src.render import RenderConfig, composite_radiance
from src.runner import map_chunks

logger = logging.getLogger("DuoField.Mesh")


@dataclass(frozen=True)
class GridSpec:
    resolution: tuple[int, int, int]
    bounds_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bounds_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise MeshError(f"grid resolution must be >= 2 per axis, got {self.resolution}")
        if any(lo >= hi for lo, hi in zip(self.bounds_min, self.bounds_max)):
            raise MeshError(f"grid bounds are empty: {self.bounds_min} .. {self.bounds_max}")

    @classmethod
    def cube(cls, resolution: int, half_extent: float = 1.0) -> "GridSpec":
        return cls((resolution,) * 3, (-half_extent,) * 3, (half_extent,) * 3)

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.bounds_max) - np.asarray(self.bounds_min)) / np.asarray(self.resolution)

    @property
    def origin(self) -> np.ndarray:
        """Centre of the first cell."""
        return np.asarray(self.bounds_min) + 0.5 * self.spacing

    def centers(self) -> np.ndarray:
        axes = [self.origin[i] + self.spacing[i] * np.arange(self.resolution[i]) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)


@dataclass
class VoxelGrid:
    spec: GridSpec
    values: np.ndarray  # (nx, ny, nz) density at cell centres

    @property
    def voxel_diagonal(self) -> float:
        return float(np.linalg.norm(self.spec.spacing))

    @property
    def extent_diagonal(self) -> float:
        return float(np.linalg.norm(np.asarray(self.spec.bounds_max) - np.asarray(self.spec.bounds_min)))


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) int
    normals: np.ndarray   # (V, 3) unit, pointing out of the dense region
    colors: Optional[np.ndarray] = None  # (V, 3) in [0, 1]

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        colors = None
        if self.colors is not None and len(self.colors):
            colors = np.round(np.clip(self.colors, 0.0, 1.0) * 255.0).astype(np.uint8)
        return trimesh.Trimesh(
            vertices=self.vertices,
            faces=self.faces,
            vertex_normals=self.normals,
            vertex_colors=colors,
            process=False,
        )


def sample_grid(density: DensityFn, spec: GridSpec, chunk_size: int = 65536,
                threads: Optional[int] = None) -> VoxelGrid:
    """Density at every cell centre, evaluated in chunks."""
    points = spec.centers()

    def run(start: int, stop: int) -> np.ndarray:
        return np.asarray(density(points[start:stop]), dtype=np.float64)

    values = np.concatenate(map_chunks(run, len(points), chunk_size, threads))
    logger.debug(f"Sampled {len(points)} voxels: density range [{values.min():.4g}, {values.max():.4g}]")
    return VoxelGrid(spec, values.reshape(spec.resolution))


def sample_field_grid(params: FieldParams, z_s, spec: GridSpec, z_t=None, chunk_size: int = 65536,
                      threads: Optional[int] = None) -> VoxelGrid:
    """Density grid of a learned field for one shape code."""
    return sample_grid(field_density_fn(params, z_s, z_t), spec, chunk_size, threads)


def otsu_iso(grid: VoxelGrid) -> float:
    """Bimodal split of the grid values; used when a learned field has no natural density scale."""
    lo, hi = float(grid.values.min()), float(grid.values.max())
    if lo == hi:
        return hi
    return float(threshold_otsu(grid.values))


def _density_gradient(grid: VoxelGrid, vertices: np.ndarray) -> np.ndarray:
    grads = np.gradient(grid.values, *grid.spec.spacing)
    coords = ((vertices - grid.spec.origin) / grid.spec.spacing).T
    return np.stack([map_coordinates(g, coords, order=1, mode="nearest") for g in grads], axis=1)


def marching_cubes(grid: VoxelGrid, iso: float) -> Mesh:
    """
    Lewiner marching cubes (with ambiguity resolution). Normals point down
    the density gradient and faces are wound to agree with them. A grid that
    never crosses iso yields an empty mesh.
    """
    lo, hi = float(grid.values.min()), float(grid.values.max())
    if not lo < iso < hi:
        logger.info(f"iso {iso:.4g} outside density range [{lo:.4g}, {hi:.4g}]; mesh is empty")
        return Mesh.empty()
    verts, faces, normals, _ = measure.marching_cubes(
        grid.values, level=iso, spacing=tuple(grid.spec.spacing),
        gradient_direction="descent", method="lewiner",
    )
    verts = verts + grid.spec.origin
    faces = faces.astype(np.int64)

    outward = -_density_gradient(grid, verts)
    length = np.linalg.norm(outward, axis=1, keepdims=True)
    fallback = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    normals = np.where(length > 1e-12, outward / np.maximum(length, 1e-300), fallback)

    face_normals = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    agreement = np.einsum("ij,ij->i", face_normals, normals[faces].mean(axis=1))
    if np.sum(agreement) < 0.0:
        faces = faces[:, ::-1].copy()
    logger.info(f"Marching cubes at iso {iso:.4g}: {len(verts)} vertices, {len(faces)} faces")
    return Mesh(vertices=verts, faces=faces, normals=normals)


def color_vertices(mesh: Mesh, radiance: RadianceFn, grid: VoxelGrid,
                   background: Sequence[float] = (0.0, 0.0, 0.0), n_samples: int = 128,
                   chunk_size: int = 4096, threads: Optional[int] = None) -> Mesh:
    """
    One ray per vertex, starting two voxel diagonals outside along the normal
    and travelling inward. Colours are normalised by the ray's opacity; rays
    that stay transparent get the background colour.
    """
    if mesh.is_empty:
        return Mesh.empty()
    offset = 2.0 * grid.voxel_diagonal
    length = grid.extent_diagonal + offset
    cfg = RenderConfig(n_samples=n_samples, near=1e-6 * length, far=length, stratified=False)
    origins = mesh.vertices + offset * mesh.normals
    directions = -mesh.normals

    def run(start: int, stop: int) -> np.ndarray:
        rgb, final = composite_radiance(radiance, origins[start:stop], directions[start:stop], cfg)
        opacity = 1.0 - final
        solid = opacity > 1e-3
        out = np.empty_like(rgb)
        out[solid] = rgb[solid] / opacity[solid, None]
        out[~solid] = np.asarray(background, dtype=np.float64)
        return out

    colors = np.concatenate(map_chunks(run, len(origins), chunk_size, threads))
    return Mesh(mesh.vertices, mesh.faces, mesh.normals, np.clip(colors, 0.0, 1.0))


def export_ply(mesh: Mesh, path: Union[str, Path]) -> Path:
    """ASCII PLY with 8-bit per-vertex colour."""
    if mesh.is_empty:
        raise MeshError("mesh is empty; nothing to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh.to_trimesh().export(path, file_type="ply", encoding="ascii")
    return path


def export_obj(mesh: Mesh, path: Union[str, Path]) -> Path:
    """Geometry-only OBJ."""
    if mesh.is_empty:
        raise MeshError("mesh is empty; nothing to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plain = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)
    plain.export(path, file_type="obj", include_color=False, include_texture=False)
    return path


def euler_characteristic(mesh: Mesh) -> int:
    return int(mesh.to_trimesh().euler_number)


def mean_radius(mesh: Mesh, center: Sequence[float] = (0.0, 0.0, 0.0)) -> float:
    if mesh.is_empty:
        return math.nan
    return float(np.mean(np.linalg.norm(mesh.vertices - np.asarray(center), axis=1)))
