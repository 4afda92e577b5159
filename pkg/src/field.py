"""
Conditional radiance field with separate shape and texture codes.

The shape network maps (gamma_x(x), z_s) to density sigma and a feature v;
the texture network maps (v, gamma_d(d), z_t) to colour. Two ablation
wirings feed the view direction (m1) or the texture code (m2) into the
shape network as well.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import FieldError

logger = logging.getLogger("DuoField.Field")


class Variant(str, Enum):
    DISENTANGLED = "disentangled"
    VIEW_IN_SHAPE = "m1"
    JOINT_CODE = "m2"


class FieldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    freqs_x: int = Field(10, ge=1)
    freqs_d: int = Field(4, ge=0)
    latent_dim: int = Field(8, ge=1)
    hidden_dim: int = Field(64, ge=1)
    feature_dim: int = Field(64, ge=1)
    shape_layers: int = Field(4, ge=1)
    texture_layers: int = Field(2, ge=1)
    variant: Variant = Variant.DISENTANGLED


@dataclass(frozen=True)
class Wiring:
    """Names of the inputs concatenated into the first layer of each sub-network."""

    shape_inputs: tuple[str, ...]
    texture_inputs: tuple[str, ...]


_WIRINGS = {
    Variant.DISENTANGLED: Wiring(("gamma_x", "z_s"), ("v", "gamma_d", "z_t")),
    Variant.VIEW_IN_SHAPE: Wiring(("gamma_x", "gamma_d", "z_s"), ("v", "gamma_d", "z_t")),
    Variant.JOINT_CODE: Wiring(("gamma_x", "z_s", "z_t"), ("v", "gamma_d", "z_t")),
}


def conditioning_modes(variant: Union[Variant, str, FieldConfig]) -> Wiring:
    if isinstance(variant, FieldConfig):
        variant = variant.variant
    try:
        return _WIRINGS[Variant(variant)]
    except ValueError:
        raise FieldError(f"unknown field variant {variant!r}") from None


def encoding_dim(freqs: int) -> int:
    return 3 + 6 * freqs


def input_dims(cfg: FieldConfig) -> dict[str, int]:
    return {
        "gamma_x": encoding_dim(cfg.freqs_x),
        "gamma_d": encoding_dim(cfg.freqs_d),
        "z_s": cfg.latent_dim,
        "z_t": cfg.latent_dim,
        "v": cfg.feature_dim,
    }


def positional_encoding(p: Union[Tensor, np.ndarray], freqs: int) -> Tensor:
    """(p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p))."""
    if freqs < 0:
        raise FieldError(f"frequency count must be non-negative, got {freqs}")
    p = ad.as_tensor(p)
    parts = [p]
    for k in range(freqs):
        scaled = ad.scale(p, (2.0 ** k) * math.pi)
        parts.extend([ad.sin(scaled), ad.cos(scaled)])
    return ad.concat(parts, axis=-1) if freqs else p


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor    # (out,)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class FieldParams:
    """Weights of the shape network (theta_s) and texture network (theta_t)."""

    config: FieldConfig
    shape_net: list[Linear]
    texture_net: list[Linear]

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for prefix, net in (("shape", self.shape_net), ("texture", self.texture_net)):
            for i, layer in enumerate(net):
                named[f"{prefix}.{i}.weight"] = layer.weight
                named[f"{prefix}.{i}.bias"] = layer.bias
        return named

    def frozen(self) -> "FieldParams":
        """Same weights as constants; nothing downstream can accumulate into them."""
        def freeze(net):
            return [Linear(ad.constant(l.weight.data), ad.constant(l.bias.data)) for l in net]
        return FieldParams(self.config, freeze(self.shape_net), freeze(self.texture_net))


@dataclass
class LatentTable:
    """Per-object codes; each table is a single trainable leaf whose rows are gathered."""

    shape_codes: Tensor    # (M, D)
    texture_codes: Tensor  # (M, D)

    def __post_init__(self) -> None:
        if self.shape_codes.shape != self.texture_codes.shape or self.shape_codes.ndim != 2:
            raise FieldError(
                f"latent tables disagree: {self.shape_codes.shape} vs {self.texture_codes.shape}"
            )
        if not (np.all(np.isfinite(self.shape_codes.data)) and np.all(np.isfinite(self.texture_codes.data))):
            raise FieldError("latent tables contain non-finite entries")

    @property
    def num_objects(self) -> int:
        return self.shape_codes.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.shape_codes.shape[1]

    def codes(self, index) -> tuple[Tensor, Tensor]:
        return ad.getitem(self.shape_codes, index), ad.getitem(self.texture_codes, index)

    def mean_codes(self) -> tuple[np.ndarray, np.ndarray]:
        return self.shape_codes.data.mean(axis=0), self.texture_codes.data.mean(axis=0)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"shape_codes": self.shape_codes, "texture_codes": self.texture_codes}


@dataclass
class FieldOutput:
    sigma: Tensor    # (P,)
    rgb: Tensor      # (P, 3)
    feature: Tensor  # (P, feature_dim)


def _linear(fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool) -> Linear:
    if zero:
        return Linear(ad.parameter(np.zeros((fan_in, fan_out))), ad.parameter(np.zeros(fan_out)))
    bound = 1.0 / math.sqrt(fan_in)
    return Linear(
        ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))),
        ad.parameter(rng.uniform(-bound, bound, size=fan_out)),
    )


def _mlp(dims: list[int], rng: np.random.Generator, zero_last: bool) -> list[Linear]:
    return [
        _linear(dims[i], dims[i + 1], rng, zero_last and i == len(dims) - 2)
        for i in range(len(dims) - 1)
    ]


def init_field(cfg: FieldConfig, rng: np.random.Generator, zero_last: bool = False) -> FieldParams:
    wiring = conditioning_modes(cfg.variant)
    dims = input_dims(cfg)
    shape_in = sum(dims[name] for name in wiring.shape_inputs)
    texture_in = sum(dims[name] for name in wiring.texture_inputs)
    shape_net = _mlp([shape_in] + [cfg.hidden_dim] * cfg.shape_layers + [1 + cfg.feature_dim], rng, zero_last)
    texture_net = _mlp([texture_in] + [cfg.hidden_dim] * cfg.texture_layers + [3], rng, zero_last)
    params = FieldParams(cfg, shape_net, texture_net)
    for name, tensor in params.named_parameters().items():
        tensor.name = name
    return params


def init_latents(num_objects: int, latent_dim: int, rng: np.random.Generator, std: float = 0.01) -> LatentTable:
    return LatentTable(
        shape_codes=ad.parameter(rng.normal(0.0, std, size=(num_objects, latent_dim)), name="shape_codes"),
        texture_codes=ad.parameter(rng.normal(0.0, std, size=(num_objects, latent_dim)), name="texture_codes"),
    )


def _per_point(z: Union[Tensor, np.ndarray], n: int, latent_dim: int, label: str) -> Tensor:
    z = ad.as_tensor(z)
    if z.shape[-1] != latent_dim:
        raise FieldError(f"{label} has dimension {z.shape[-1]}, expected {latent_dim}")
    if z.ndim == 1:
        return ad.broadcast_to(ad.reshape(z, (1, latent_dim)), (n, latent_dim))
    if z.shape != (n, latent_dim):
        raise FieldError(f"{label} has shape {z.shape}, expected ({n}, {latent_dim})")
    return z


def eval_field(params: FieldParams, z_s, z_t, x, d) -> FieldOutput:
    """
    Query the field at points x (P, 3) seen along unit directions d (P, 3).
    Codes are either one (D,) vector shared by all points or one row per point.
    """
    cfg = params.config
    wiring = conditioning_modes(cfg.variant)
    x, d = ad.as_tensor(x), ad.as_tensor(d)
    if x.ndim != 2 or x.shape[1] != 3 or d.shape != x.shape:
        raise FieldError(f"points {x.shape} and directions {d.shape} must both be (P, 3)")
    if np.any(np.abs(np.linalg.norm(d.data, axis=1) - 1.0) > 1e-6):
        raise FieldError("view directions must be unit length")
    n = x.shape[0]

    inputs: dict[str, Tensor] = {
        "z_s": _per_point(z_s, n, cfg.latent_dim, "shape code"),
        "z_t": _per_point(z_t, n, cfg.latent_dim, "texture code"),
        "gamma_x": positional_encoding(x, cfg.freqs_x),
    }
    if "gamma_d" in wiring.shape_inputs + wiring.texture_inputs:
        inputs["gamma_d"] = positional_encoding(d, cfg.freqs_d)

    h = ad.concat([inputs[name] for name in wiring.shape_inputs], axis=-1)
    for layer in params.shape_net[:-1]:
        h = ad.relu(layer(h))
    out = params.shape_net[-1](h)
    sigma = ad.softplus(out[:, 0])
    inputs["v"] = out[:, 1:]

    h = ad.concat([inputs[name] for name in wiring.texture_inputs], axis=-1)
    for layer in params.texture_net[:-1]:
        h = ad.relu(layer(h))
    rgb = ad.sigmoid(params.texture_net[-1](h))
    return FieldOutput(sigma=sigma, rgb=rgb, feature=inputs["v"])


RadianceFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
DensityFn = Callable[[np.ndarray], np.ndarray]


def field_radiance_fn(params: FieldParams, z_s, z_t) -> RadianceFn:
    """Numpy (x, d) -> (sigma, rgb) adapter over a fixed pair of codes."""
    z_s, z_t = np.asarray(_data(z_s)), np.asarray(_data(z_t))

    def radiance(x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with ad.no_trace():
            out = eval_field(params, z_s, z_t, x, d)
        return out.sigma.data, out.rgb.data

    return radiance


def field_density_fn(params: FieldParams, z_s, z_t: Optional[np.ndarray] = None) -> DensityFn:
    """Density only. The direction is fixed; z_t defaults to zeros and is unused when disentangled."""
    if z_t is None:
        z_t = np.zeros(params.config.latent_dim)
    radiance = field_radiance_fn(params, z_s, z_t)

    def density(x: np.ndarray) -> np.ndarray:
        d = np.broadcast_to(np.array([0.0, 0.0, -1.0]), x.shape)
        return radiance(x, d)[0]

    return density


def _data(z) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else z
