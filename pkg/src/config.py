"""
Run configuration: one validated tree built from defaults, an optional JSON
file, the environment, and command-line flags (in increasing precedence).
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from src.errors import ConfigError
from src.field import FieldConfig
from src.inference import InferConfig
from src.render import RenderConfig
from src.train import TrainConfig

logger = logging.getLogger("DuoField.Config")

DATA_ROOT_ENV = "DUOFIELD_DATA_ROOT"


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    objects: int = Field(4, ge=1)
    views: int = Field(20, ge=1)
    size: int = Field(16, ge=1)
    fov_deg: float = Field(45.0, gt=0.0, lt=180.0)
    rho: float = Field(2.5, gt=0.0)
    oracle_samples: int = Field(512, ge=2)
    white_background: bool = False
    opencv_poses: bool = False


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_root: Path = Path("data")
    output: Path = Path("runs")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    field: FieldConfig = Field(default_factory=FieldConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    infer: InferConfig = Field(default_factory=InferConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)


def _set_dotted(tree: dict, key: str, value: Any) -> None:
    node = tree
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
        node = child
    node[parts[-1]] = value


def read_config_file(path: Union[str, Path]) -> dict:
    try:
        tree = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return tree


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """
    Overrides use dotted keys ("train.iterations"); None values are ignored.
    The data root falls back to $DUOFIELD_DATA_ROOT when set.
    """
    tree = read_config_file(path) if path else {}
    data_root = os.getenv(DATA_ROOT_ENV)
    if data_root:
        _set_dotted(tree, "paths.data_root", data_root)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)
    cfg = RunConfig.model_validate(tree)
    logger.debug(f"Run config: {cfg.model_dump_json()}")
    return cfg


def dump_run_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.model_dump_json(indent=2) + "\n")
