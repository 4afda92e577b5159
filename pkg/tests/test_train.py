import json

import numpy as np
import pytest

from src import autodiff as ad
from src.checkpoint import load_checkpoint, save_checkpoint
from src.data import ObjectViews, SceneDataset, View
from src.errors import CheckpointError, ShapeError, TrainingError
from src.field import init_field, init_latents
from src.state import TrainState
from src.train import TrainConfig, dataset_rays, steps_per_epoch, total_iterations, train, train_loss


def _arrays(ckpt):
    named = {**ckpt.params.named_parameters(), **ckpt.latents.named_parameters()}
    return {name: t.data.copy() for name, t in named.items()}


def _render_cfg(dataset):
    return dataset.meta.render_config(8, stratified=True)


def test_loss_examples():
    target = np.array([[0.2, 0.4, 0.6]])
    zeros = [ad.constant(np.zeros(3)), ad.constant(np.zeros(3))]
    assert train_loss(target, target, zeros, 100.0).item() == 0.0
    assert train_loss(target + [0.1, 0.0, 0.0], target, zeros, 100.0).item() == pytest.approx(0.01)
    units = [ad.constant([1.0, 0.0, 0.0]), ad.constant([0.0, 1.0, 0.0])]
    assert train_loss(target, target, units, 10.0).item() == pytest.approx(0.02)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        train_loss(np.zeros((2, 3)), np.zeros((3, 3)), [], 1.0)


def test_ray_table_covers_every_pixel(tiny_dataset):
    table = dataset_rays(tiny_dataset)
    assert len(table) == 2 * 3 * 64
    assert np.array_equal(np.bincount(table.objects), [192, 192])
    assert np.array_equal(table.colors[:64], tiny_dataset.objects[0].views[0].image.reshape(-1, 3))


def test_epoch_arithmetic():
    assert steps_per_epoch(100, 32) == 4
    assert total_iterations(TrainConfig(iterations=7), 100) == 7
    assert total_iterations(TrainConfig(iterations=7, epochs=2, rays_per_batch=32), 100) == 8


def test_zero_iterations_returns_initialisation(tiny_dataset, tiny_field_cfg):
    cfg = TrainConfig(iterations=0, seed=11)
    result = train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset), cfg)
    rng = np.random.default_rng(11)
    params = init_field(tiny_field_cfg, rng)
    latents = init_latents(2, tiny_field_cfg.latent_dim, rng, std=cfg.latent_init_std)
    expected = {name: t.data for name, t in {**params.named_parameters(), **latents.named_parameters()}.items()}
    got = _arrays(result.checkpoint)
    assert got.keys() == expected.keys()
    assert all(np.array_equal(got[k], expected[k]) for k in got)
    assert result.checkpoint.step == 0
    assert result.final_psnr is None


def test_same_seed_is_bit_identical(tiny_dataset, tiny_field_cfg, tiny_train_cfg, tmp_path):
    a = train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset), tiny_train_cfg)
    b = train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset), tiny_train_cfg)
    save_checkpoint(a.checkpoint, tmp_path / "a.ckpt")
    save_checkpoint(b.checkpoint, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_training_moves_codes_and_weights(tiny_dataset, tiny_field_cfg, tiny_train_cfg):
    init = train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset),
                 tiny_train_cfg.model_copy(update={"iterations": 0}))
    trained = train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset), tiny_train_cfg)
    before, after = _arrays(init.checkpoint), _arrays(trained.checkpoint)
    assert not np.array_equal(before["shape_codes"], after["shape_codes"])
    assert not np.array_equal(before["shape.0.weight"], after["shape.0.weight"])
    assert trained.checkpoint.step == 3
    assert len(trained.history) == 3


def test_resume_matches_uninterrupted(tiny_dataset, tiny_field_cfg, tiny_train_cfg, tmp_path):
    render_cfg = _render_cfg(tiny_dataset)
    full = train(tiny_dataset, tiny_field_cfg, render_cfg, tiny_train_cfg.model_copy(update={"iterations": 4}))

    log = tmp_path / "log.jsonl"
    first = train(tiny_dataset, tiny_field_cfg, render_cfg, tiny_train_cfg.model_copy(update={"iterations": 2}),
                  log_path=log)
    save_checkpoint(first.checkpoint, tmp_path / "half.ckpt")
    resumed = train(tiny_dataset, tiny_field_cfg, render_cfg, tiny_train_cfg.model_copy(update={"iterations": 4}),
                    log_path=log, resume=load_checkpoint(tmp_path / "half.ckpt"))

    assert resumed.checkpoint.step == 4
    got, expected = _arrays(resumed.checkpoint), _arrays(full.checkpoint)
    assert all(np.array_equal(got[k], expected[k]) for k in got)
    steps = [json.loads(line)["iteration"] for line in log.read_text().splitlines()]
    assert steps == [0, 1, 2, 3]


def test_log_records(tiny_dataset, tiny_field_cfg, tiny_train_cfg, tmp_path):
    state = TrainState()
    train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset), tiny_train_cfg,
          log_path=tmp_path / "train.jsonl", state=state)
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    assert len(lines) == tiny_train_cfg.iterations
    record = json.loads(lines[0])
    assert set(record) == {"iteration", "loss", "psnr", "lr_net", "wall_time"}
    assert state.step == 3 and not state.running
    assert len(state.epoch_psnr) == 1


def test_resume_rejects_other_objects(tiny_dataset, tiny_field_cfg, tiny_train_cfg, tiny_checkpoint):
    tiny_checkpoint.object_ids = ["a", "b"]
    with pytest.raises(CheckpointError):
        train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset), tiny_train_cfg, resume=tiny_checkpoint)


def test_nan_loss_aborts_with_snapshot(tiny_dataset, tiny_field_cfg, tiny_train_cfg, tmp_path):
    first = tiny_dataset.objects[0]
    broken = [View(np.full_like(v.image, np.nan), v.c2w, v.intrinsics) for v in first.views]
    dataset = SceneDataset([ObjectViews(first.object_id, broken)], tiny_dataset.meta)
    state = TrainState()
    with pytest.raises(TrainingError) as info:
        train(dataset, tiny_field_cfg, _render_cfg(dataset), tiny_train_cfg, snapshot_dir=tmp_path, state=state)
    assert info.value.snapshot is not None
    assert load_checkpoint(info.value.snapshot).step == 0
    assert state.error is not None


def test_perfect_batch_logs_null_psnr(tiny_dataset, tiny_field_cfg, tiny_train_cfg, tmp_path, monkeypatch):
    monkeypatch.setattr("src.train.psnr", lambda a, b: float("inf"))
    result = train(tiny_dataset, tiny_field_cfg, _render_cfg(tiny_dataset), tiny_train_cfg,
                   log_path=tmp_path / "train.jsonl")

    def reject(token):
        raise ValueError(f"non-standard JSON constant {token}")

    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    records = [json.loads(line, parse_constant=reject) for line in lines]
    assert all(r["psnr"] is None for r in records)
    assert result.epoch_psnr == [99.0]
