"""Shared fixtures: tiny networks, cameras and datasets that keep the suite fast."""

import numpy as np
import pytest

from src.camera import CameraPose, Intrinsics
from src.data import generate_dataset
from src.field import FieldConfig, init_field, init_latents
from src.render import RenderConfig
from src.train import TrainConfig, initial_checkpoint


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_field_cfg():
    return FieldConfig(freqs_x=2, freqs_d=1, latent_dim=3, hidden_dim=8, feature_dim=6,
                       shape_layers=2, texture_layers=1)


@pytest.fixture
def tiny_params(tiny_field_cfg):
    return init_field(tiny_field_cfg, np.random.default_rng(1))


@pytest.fixture
def tiny_latents(tiny_field_cfg):
    return init_latents(2, tiny_field_cfg.latent_dim, np.random.default_rng(2), std=0.5)


@pytest.fixture
def tiny_render_cfg():
    return RenderConfig(n_samples=8, near=1.0, far=4.0, stratified=False)


@pytest.fixture
def tiny_K():
    return Intrinsics.from_fov(5, 45.0)


@pytest.fixture
def front_pose():
    return CameraPose(0.4, 0.3, 2.5)


@pytest.fixture(scope="session")
def tiny_dataset():
    """2 objects x 3 views at 8x8; never mutated by tests."""
    return generate_dataset(2, 3, 8, seed=3, oracle_samples=64, threads=1)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(rays_per_batch=32, iterations=3, seed=5, lr_net=1e-3, lr_latent=1e-2)


@pytest.fixture
def tiny_checkpoint(tiny_dataset, tiny_field_cfg, tiny_train_cfg):
    render_cfg = tiny_dataset.meta.render_config(8, stratified=False)
    return initial_checkpoint(tiny_dataset, tiny_field_cfg, render_cfg, tiny_train_cfg)
