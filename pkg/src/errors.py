"""
Error hierarchy shared by every module.
Each error carries a stable code so the CLI can print a parsable prefix.
"""

from typing import Optional


class DuoFieldError(Exception):
    """Base error. `code` is the machine-readable prefix used by the CLI."""

    code = "duofield"

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class ShapeError(DuoFieldError):
    """Operand shapes do not conform for a tensor operation."""

    code = "shape"

    def __init__(self, op: str, *shapes: tuple) -> None:
        listed = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")
        self.op = op
        self.shapes = shapes


class GradientError(DuoFieldError):
    code = "gradient"


class CameraError(DuoFieldError):
    code = "camera"


class FieldError(DuoFieldError):
    code = "field"


class RenderError(DuoFieldError):
    code = "render"


class OptimError(DuoFieldError):
    code = "optim"


class TrainingError(DuoFieldError):
    """Training aborted. `snapshot` points at the diagnostic checkpoint, if one was written."""

    code = "training"

    def __init__(self, message: str, snapshot: Optional[str] = None) -> None:
        if snapshot:
            message = f"{message} (snapshot: {snapshot})"
        super().__init__(message)
        self.snapshot = snapshot


class DatasetError(DuoFieldError):
    code = "dataset"


class MeshError(DuoFieldError):
    code = "mesh"


class MetricsError(DuoFieldError):
    code = "metrics"


class CheckpointError(DuoFieldError):
    code = "checkpoint"


class ConfigError(DuoFieldError):
    code = "config"
