"""
Camera extrinsics, intrinsics and ray generation.

Convention: the camera looks down its -z axis, +x right, +y up (OpenGL).
Rotations called `rotation` are world->camera (the R of the pose model);
camera-to-world matrices are [R^T | p] with p the camera centre.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import CameraError

logger = logging.getLogger("DuoField.Camera")

ORTHO_TOL = 1e-9
POLE_MARGIN = 1e-4
WORLD_UP = np.array([0.0, 0.0, 1.0])

Scalar = Union[float, Tensor]


def _value(x: Scalar) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


@dataclass
class CameraPose:
    """Azimuth phi, elevation theta (radians) and distance rho; fields may be differentiable."""

    phi: Scalar
    theta: Scalar
    rho: Scalar

    def __post_init__(self) -> None:
        if not _value(self.rho) > 0.0:
            raise CameraError(f"rho must be positive, got {_value(self.rho)}")
        if not -math.pi / 2 < _value(self.theta) < math.pi / 2:
            raise CameraError(f"theta must lie in (-pi/2, pi/2), got {_value(self.theta)}")

    def values(self) -> tuple[float, float, float]:
        return _value(self.phi), _value(self.theta), _value(self.rho)

    def canonical(self) -> "CameraPose":
        """Plain floats with azimuth wrapped into [0, 2pi)."""
        phi, theta, rho = self.values()
        return CameraPose(phi % (2.0 * math.pi), theta, rho)

    def to_dict(self) -> dict:
        phi, theta, rho = self.values()
        return {"phi": phi, "theta": theta, "rho": rho}


@dataclass
class Extrinsic:
    """World->camera rotation R and camera centre p; T_cw = [R^T | p]."""

    rotation: np.ndarray
    position: np.ndarray

    @property
    def c2w(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = self.position
        return m

    @property
    def translation(self) -> np.ndarray:
        """World->camera translation t = -R p."""
        return -self.rotation @ self.position

    @classmethod
    def from_c2w(cls, c2w: np.ndarray, tol: float = 1e-6) -> "Extrinsic":
        c2w = np.asarray(c2w, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise CameraError(f"camera-to-world matrix must be 4x4, got {c2w.shape}")
        check_rotation(c2w[:3, :3], tol)
        return cls(rotation=c2w[:3, :3].T.copy(), position=c2w[:3, 3].copy())


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, size: int, fov_deg: float) -> "Intrinsics":
        """Square image, principal point at the pixel-grid centre."""
        focal = 0.5 * size / math.tan(math.radians(fov_deg) / 2.0)
        centre = (size - 1) / 2.0
        return cls(focal, focal, centre, centre, size, size)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class AxisAngle:
    k: np.ndarray
    theta_aa: float


@dataclass
class Rays:
    """A batch of rays; directions are unit length."""

    origins: Tensor
    directions: Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, index) -> "Rays":
        return Rays(ad.getitem(self.origins, index), ad.getitem(self.directions, index))


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class UprightCheck:
    """Closed-form upright angle against a numeric root of the upright condition."""

    k: np.ndarray
    theta_formula: float
    theta_root: float
    residual_formula: float
    residual_root: float
    agrees: bool


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise CameraError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise CameraError(f"not a rotation matrix:\n{R}")


def pose_tensors(pose: CameraPose) -> tuple[Tensor, Tensor]:
    """Differentiable (R, p) of the azimuth/elevation/distance model."""
    phi, theta, rho = (ad.as_tensor(v) for v in (pose.phi, pose.theta, pose.rho))
    sp, cp = ad.sin(phi), ad.cos(phi)
    st, ct = ad.sin(theta), ad.cos(theta)
    zero = ad.constant(0.0)
    R = ad.stack([
        ad.stack([-sp, cp, zero]),
        ad.stack([-(st * cp), -(st * sp), ct]),
        ad.stack([ct * cp, ct * sp, st]),
    ])
    p = ad.stack([rho * ct * cp, rho * ct * sp, rho * st])
    return R, p


def rotation_from_pose(pose: CameraPose) -> Extrinsic:
    with ad.no_trace():
        R, p = pose_tensors(pose)
    return Extrinsic(rotation=R.data.copy(), position=p.data.copy())


def camera_position(pose: CameraPose) -> np.ndarray:
    phi, theta, rho = pose.values()
    return rho * np.array([math.cos(theta) * math.cos(phi),
                           math.cos(theta) * math.sin(phi),
                           math.sin(theta)])


def look_at(origin: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0),
            angle_tol: float = 1e-6) -> Extrinsic:
    """c2w = [r | u | b | o] with b = normalize(o - target), r = normalize(w x b), u = b x r."""
    o = np.asarray(origin, dtype=np.float64)
    b = o - np.asarray(target, dtype=np.float64)
    length = np.linalg.norm(b)
    if length == 0.0:
        raise CameraError("look_at: camera origin coincides with target")
    b = b / length
    r = np.cross(WORLD_UP, b)
    if np.linalg.norm(r) < math.sin(angle_tol):
        raise CameraError(f"look_at: viewing axis {b.tolist()} is parallel to world up")
    r = r / np.linalg.norm(r)
    u = np.cross(b, r)
    c2w_rot = np.stack([r, u, b], axis=1)
    return Extrinsic(rotation=c2w_rot.T, position=o)


def pose_lookat_consistency(pose: CameraPose) -> tuple[Extrinsic, Extrinsic]:
    """Both constructions of the same camera; their c2w rotations agree."""
    from_pose = rotation_from_pose(pose)
    return from_pose, look_at(from_pose.position, (0.0, 0.0, 0.0))


def pose_from_c2w(c2w: np.ndarray) -> CameraPose:
    """Recover (phi, theta, rho) from the camera centre of a camera facing the origin."""
    p = np.asarray(c2w, dtype=np.float64)[:3, 3]
    rho = float(np.linalg.norm(p))
    if rho == 0.0:
        raise CameraError("camera centre at the origin has no spherical pose")
    theta = math.asin(max(-1.0, min(1.0, p[2] / rho)))
    phi = math.atan2(p[1], p[0]) % (2.0 * math.pi)
    return CameraPose(phi, theta, rho)


def skew(k: np.ndarray) -> np.ndarray:
    kx, ky, kz = k
    return np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])


def rodrigues(aa: AxisAngle) -> np.ndarray:
    """R = I + sin(theta) K + (1 - cos(theta)) K^2."""
    k = np.asarray(aa.k, dtype=np.float64)
    if k.shape != (3,) or abs(np.linalg.norm(k) - 1.0) > ORTHO_TOL:
        raise CameraError(f"rotation axis must be a unit 3-vector, got {k.tolist()}")
    K = skew(k)
    return np.eye(3) + math.sin(aa.theta_aa) * K + (1.0 - math.cos(aa.theta_aa)) * (K @ K)


def world_to_cam(rotation: np.ndarray, translation: Sequence[float]) -> RigidTransform:
    """Invert T_wc = [R | t] into T_cw = [R^T | -R^T t]."""
    check_rotation(rotation)
    R = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    return RigidTransform(rotation=R.T.copy(), translation=-R.T @ t)


def upright_theta(k: Sequence[float], eps: float = 1e-12) -> float:
    """cos(theta) = (kx^2 kz^2 - ky^2) / (kx^2 kz^2 + ky^2)."""
    kx, ky, kz = (float(v) for v in k)
    denom = kx * kx * kz * kz + ky * ky
    if denom <= eps:
        raise CameraError(f"upright angle undefined for axis {[kx, ky, kz]}")
    ratio = (kx * kx * kz * kz - ky * ky) / denom
    return math.acos(max(-1.0, min(1.0, ratio)))


def _upright_residual(k: np.ndarray, theta: float) -> float:
    # world-z component of the camera x-axis
    return float(rodrigues(AxisAngle(k, theta))[2, 0])


def upright_report(k: Sequence[float], tol: float = 1e-9) -> UprightCheck:
    """Check the closed-form angle against a bracketed root of R[2][0](theta) = 0."""
    k = np.asarray(k, dtype=np.float64)
    theta_formula = upright_theta(k)
    lo, hi = 1e-9, 2.0 * math.pi - 1e-9
    f_lo, f_hi = _upright_residual(k, lo), _upright_residual(k, hi)
    if f_lo * f_hi < 0.0:
        theta_root = brentq(lambda t: _upright_residual(k, t), lo, hi, xtol=1e-15)
    else:
        theta_root = 0.0
    residual_formula = _upright_residual(k, theta_formula)
    check = UprightCheck(
        k=k,
        theta_formula=theta_formula,
        theta_root=theta_root,
        residual_formula=residual_formula,
        residual_root=_upright_residual(k, theta_root),
        agrees=abs(residual_formula) < tol,
    )
    if not check.agrees:
        logger.info(f"upright formula misses for axis {k.tolist()}: "
                    f"formula {theta_formula:.6f} vs root {theta_root:.6f}")
    return check


def pixel_grid(K: Intrinsics) -> np.ndarray:
    """(H*W, 2) array of (row, col) in row-major order."""
    rows, cols = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1).astype(np.float64)


def camera_directions(K: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if np.any(rows < 0) or np.any(rows > K.height - 1) or np.any(cols < 0) or np.any(cols > K.width - 1):
        raise CameraError(f"pixel outside {K.width}x{K.height} image")
    return np.stack([(cols - K.cx) / K.fx, -(rows - K.cy) / K.fy, -np.ones_like(rows)], axis=1)


def generate_rays(camera: Union[CameraPose, Extrinsic], K: Intrinsics,
                  pixels: Optional[np.ndarray] = None) -> Rays:
    """Back-project pixels (row, col) into world rays; differentiable in a CameraPose."""
    if pixels is None:
        pixels = pixel_grid(K)
    dirs_cam = ad.constant(camera_directions(K, pixels))
    if isinstance(camera, CameraPose):
        R, p = pose_tensors(camera)
    else:
        R, p = ad.constant(camera.rotation), ad.constant(camera.position)
    n = dirs_cam.shape[0]
    # row-vector form of R^T d
    world = dirs_cam @ R
    norm = ad.sqrt(ad.sum_(ad.square(world), axis=-1, keepdims=True))
    directions = world / norm
    origins = ad.broadcast_to(ad.reshape(p, (1, 3)), (n, 3))
    return Rays(origins, directions)


def read_pose_file(path: Union[str, Path]) -> np.ndarray:
    """16 whitespace-separated floats, row-major 4x4 camera-to-world."""
    try:
        values = [float(tok) for tok in Path(path).read_text().split()]
    except ValueError as e:
        raise CameraError(f"{path}: unparsable pose ({e})") from None
    if len(values) != 16:
        raise CameraError(f"{path}: expected 16 floats, found {len(values)}")
    return np.array(values).reshape(4, 4)


def write_pose_file(path: Union[str, Path], c2w: np.ndarray) -> None:
    flat = np.asarray(c2w, dtype=np.float64).reshape(-1)
    Path(path).write_text(" ".join(f"{v:.17g}" for v in flat) + "\n")
