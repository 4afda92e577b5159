"""
Image and pose metrics: PSNR, SSIM, geodesic rotation error and relative
camera-centre error, with the 5 deg / 3 % outlier rule.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from skimage.metrics import structural_similarity

from src.camera import CameraPose, Extrinsic, rotation_from_pose
from src.errors import MetricsError

logger = logging.getLogger("DuoField.Metrics")

# Fixed SSIM settings: 11x11 Gaussian window (sigma 1.5, truncated at 3.5 sigma)
SSIM_SETTINGS = {
    "gaussian_weights": True,
    "sigma": 1.5,
    "use_sample_covariance": False,
    "K1": 0.01,
    "K2": 0.03,
    "data_range": 1.0,
}
SSIM_WINDOW = 11
LUMA = np.array([0.299, 0.587, 0.114])

ROT_OUTLIER_DEG = 5.0
TRANS_OUTLIER_REL = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10(MSE) for images in [0, 1]; identical images give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def to_luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA
    raise MetricsError(f"expected an HxW or HxWx3 image, got shape {image.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the luma channels."""
    a, b = _check_pair(a, b)
    ya, yb = to_luma(a), to_luma(b)
    if min(ya.shape) < SSIM_WINDOW:
        raise MetricsError(f"image {ya.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(structural_similarity(ya, yb, **SSIM_SETTINGS))


@dataclass
class PoseError:
    rot_deg: float
    trans_rel: float

    def is_outlier(self, rot_deg: float = ROT_OUTLIER_DEG, trans_rel: float = TRANS_OUTLIER_REL) -> bool:
        return self.rot_deg > rot_deg or self.trans_rel > trans_rel


def _as_extrinsic(camera: Union[CameraPose, Extrinsic]) -> Extrinsic:
    return rotation_from_pose(camera) if isinstance(camera, CameraPose) else camera


def pose_error(est: Union[CameraPose, Extrinsic], gt: Union[CameraPose, Extrinsic]) -> PoseError:
    """Geodesic angle between rotations; camera-centre distance relative to |p_gt|."""
    e, g = _as_extrinsic(est), _as_extrinsic(gt)
    cos_angle = (np.trace(e.rotation.T @ g.rotation) - 1.0) / 2.0
    rot_deg = math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
    scale = np.linalg.norm(g.position)
    if scale == 0.0:
        raise MetricsError("ground-truth camera centre is at the origin")
    trans_rel = float(np.linalg.norm(e.position - g.position) / scale)
    return PoseError(rot_deg=rot_deg, trans_rel=trans_rel)


@dataclass
class PoseErrorSummary:
    count: int
    inliers: list[int] = field(default_factory=list)
    outliers: list[int] = field(default_factory=list)
    rot_under_5: float = 0.0
    rot_under_10: float = 0.0
    trans_under_3: float = 0.0
    trans_under_5: float = 0.0
    median_rot_deg: Optional[float] = None
    median_trans_rel: Optional[float] = None

    @property
    def inlier_fraction(self) -> float:
        return len(self.inliers) / self.count if self.count else 1.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["inlier_fraction"] = self.inlier_fraction
        return out


def outlier_filter(errors: Sequence[PoseError]) -> PoseErrorSummary:
    """Split into inliers/outliers (rotation > 5 deg or translation > 3 %) and report threshold fractions."""
    n = len(errors)
    summary = PoseErrorSummary(count=n)
    if n == 0:
        return summary
    for i, err in enumerate(errors):
        (summary.outliers if err.is_outlier() else summary.inliers).append(i)
    rot = np.array([e.rot_deg for e in errors])
    trans = np.array([e.trans_rel for e in errors])
    summary.rot_under_5 = float(np.mean(rot < 5.0))
    summary.rot_under_10 = float(np.mean(rot < 10.0))
    summary.trans_under_3 = float(np.mean(trans < 0.03))
    summary.trans_under_5 = float(np.mean(trans < 0.05))
    summary.median_rot_deg = float(np.median(rot))
    summary.median_trans_rel = float(np.median(trans))
    return summary


def json_number(value):
    """Non-finite floats become None; JSON has no spelling for them."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_report(path: Union[str, Path], rows: list[dict], summary: dict) -> tuple[Path, Path]:
    """Evaluation report as JSON (per-view rows + summary) with a CSV table beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clean_rows = [{k: json_number(v) for k, v in row.items()} for row in rows]
    clean_summary = {k: json_number(v) for k, v in summary.items()}
    path.write_text(json.dumps({"views": clean_rows, "summary": clean_summary}, indent=2) + "\n")

    csv_path = path.with_suffix(".csv")
    columns = list(rows[0].keys()) if rows else []
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in clean_rows:
            writer.writerow(row)
    logger.info(f"Report written to {path} and {csv_path}")
    return path, csv_path
