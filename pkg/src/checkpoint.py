"""
Self-describing array container and model checkpoints.

Layout: 4-byte magic, uint32 little-endian header length, JSON header,
then raw little-endian float64 arrays in header order.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from src import autodiff as ad
from src.errors import CheckpointError
from src.field import FieldConfig, FieldParams, LatentTable, Linear
from src.render import RenderConfig

logger = logging.getLogger("DuoField.Checkpoint")

MAGIC = b"DUOF"
VERSION = 1


def write_container(path: Union[str, Path], header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, offset, blobs = [], 0, []
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    meta = {"version": VERSION, **header, "arrays": entries}
    encoded = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def read_container(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a DuoField container")
    (length,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + length].decode("utf-8"))
    if "version" not in header:
        raise CheckpointError(f"{path}: header has no version")
    if header["version"] > VERSION:
        raise CheckpointError(f"{path}: container version {header['version']} is newer than {VERSION}")
    body = raw[8 + length:]
    arrays = {}
    for entry in header.pop("arrays"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        chunk = body[start:start + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"{path}: array {entry['name']} is truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return header, arrays


@dataclass
class Checkpoint:
    field_config: FieldConfig
    render_config: RenderConfig
    params: FieldParams
    latents: LatentTable
    object_ids: list[str]
    step: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def object_index(self, object_id: str) -> int:
        try:
            return self.object_ids.index(object_id)
        except ValueError:
            raise CheckpointError(f"object {object_id!r} is not in this checkpoint") from None


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    arrays = {name: t.data for name, t in ckpt.params.named_parameters().items()}
    arrays.update({name: t.data for name, t in ckpt.latents.named_parameters().items()})
    arrays.update({f"optim/{name}": value for name, value in ckpt.optimizer_state.items()})
    header = {
        "kind": "checkpoint",
        "field_config": ckpt.field_config.model_dump(mode="json"),
        "render_config": ckpt.render_config.model_dump(mode="json"),
        "object_ids": list(ckpt.object_ids),
        "step": ckpt.step,
        "metadata": ckpt.metadata,
    }
    write_container(path, header, arrays)
    logger.info(f"Checkpoint written to {path} (step {ckpt.step})")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container does not hold a checkpoint")
    field_cfg = FieldConfig.model_validate(header["field_config"])
    render_cfg = RenderConfig.model_validate(header["render_config"])

    def net(prefix: str) -> list[Linear]:
        layers, i = [], 0
        while f"{prefix}.{i}.weight" in arrays:
            layers.append(Linear(
                ad.parameter(arrays[f"{prefix}.{i}.weight"], name=f"{prefix}.{i}.weight"),
                ad.parameter(arrays[f"{prefix}.{i}.bias"], name=f"{prefix}.{i}.bias"),
            ))
            i += 1
        if not layers:
            raise CheckpointError(f"{path}: no {prefix} network weights")
        return layers

    try:
        latents = LatentTable(
            ad.parameter(arrays["shape_codes"], name="shape_codes"),
            ad.parameter(arrays["texture_codes"], name="texture_codes"),
        )
    except KeyError as e:
        raise CheckpointError(f"{path}: missing latent table {e}") from None
    return Checkpoint(
        field_config=field_cfg,
        render_config=render_cfg,
        params=FieldParams(field_cfg, net("shape"), net("texture")),
        latents=latents,
        object_ids=list(header["object_ids"]),
        step=int(header.get("step", 0)),
        optimizer_state={k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")},
        metadata=header.get("metadata", {}),
    )


def dump_image(path: Union[str, Path], image: np.ndarray, extra: Optional[dict] = None) -> None:
    """Lossless float64 image dump in the container format."""
    write_container(path, {"kind": "image", **(extra or {})}, {"image": image})


def load_image_dump(path: Union[str, Path]) -> np.ndarray:
    header, arrays = read_container(path)
    if header.get("kind") != "image":
        raise CheckpointError(f"{path}: container does not hold an image")
    return arrays["image"]
