import json

import pytest

from app import main
from src.checkpoint import load_checkpoint, load_image_dump
from src.render import load_png

TINY_RUN = {
    "field": {"freqs_x": 2, "freqs_d": 1, "latent_dim": 3, "hidden_dim": 8, "feature_dim": 6,
              "shape_layers": 2, "texture_layers": 1},
    "render": {"n_samples": 8},
    "train": {"iterations": 2, "rays_per_batch": 32},
    "infer": {"iterations": 2},
    "data": {"objects": 2, "views": 2, "size": 8, "oracle_samples": 32},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    assert main(["--config", str(config), "--threads", "1", "dataset", "gen", "-o", str(root / "data")]) == 0
    assert main(["--config", str(config), "--threads", "1", "train", "--data", str(root / "data"),
                 "-o", str(root / "train")]) == 0
    return root


def _run(workspace, *argv):
    return main(["--config", str(workspace / "run.json"), "--threads", "1", *argv])


def test_dataset_layout(workspace):
    data = workspace / "data"
    assert (data / "dataset.json").exists()
    assert sorted(p.name for p in (data / "obj_0001" / "rgb").iterdir()) == ["000000.png", "000001.png"]
    assert (data / "obj_0000" / "intrinsics.txt").exists()


def test_dataset_is_reproducible(workspace):
    assert _run(workspace, "dataset", "gen", "-o", str(workspace / "again")) == 0
    first = sorted(p.relative_to(workspace / "data") for p in (workspace / "data").rglob("*") if p.is_file())
    assert all((workspace / "data" / f).read_bytes() == (workspace / "again" / f).read_bytes() for f in first)


def test_train_outputs(workspace):
    out = workspace / "train"
    ckpt = load_checkpoint(out / "model.ckpt")
    assert ckpt.step == 2
    assert ckpt.object_ids == ["obj_0000", "obj_0001"]
    assert ckpt.field_config.hidden_dim == 8
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 2
    assert json.loads((out / "config.json").read_text())["train"]["iterations"] == 2


def test_render_with_dump(workspace, capsys):
    png, dump = workspace / "view.png", workspace / "view.bin"
    assert _run(workspace, "render", str(workspace / "train" / "model.ckpt"), "--object", "obj_0001",
                "--phi", "30", "--theta", "20", "--dump", str(dump), "-o", str(png)) == 0
    image = load_png(png)
    assert image.shape == (8, 8, 3)
    assert load_image_dump(dump).shape == (8, 8, 3)
    assert "✅ Rendered 8x8" in capsys.readouterr().out


def test_render_unknown_object(workspace, capsys):
    code = _run(workspace, "render", str(workspace / "train" / "model.ckpt"), "--object", "nope",
                "-o", str(workspace / "x.png"))
    assert code == 1
    assert capsys.readouterr().err.startswith("error[checkpoint]:")


def test_invert_writes_result_and_snapshots(workspace):
    out = workspace / "invert"
    image = workspace / "data" / "obj_0000" / "rgb" / "000000.png"
    assert _run(workspace, "invert", str(workspace / "train" / "model.ckpt"), str(image), "-o", str(out)) == 0
    result = json.loads((out / "result.json").read_text())
    assert len(result["z_s"]) == 3 and len(result["z_t"]) == 3
    assert (out / "snapshots" / "iter_0000.png").exists()
    assert (out / "snapshots" / "final.png").exists()
    assert load_png(out / "strip.png").shape[0] == 8
    assert len((out / "invert_log.jsonl").read_text().splitlines()) == 2


def test_inverted_codes_render(workspace):
    out = workspace / "invert_codes"
    image = workspace / "data" / "obj_0001" / "rgb" / "000001.png"
    assert _run(workspace, "invert", str(workspace / "train" / "model.ckpt"), str(image), "-o", str(out)) == 0
    assert _run(workspace, "render", str(workspace / "train" / "model.ckpt"), "--codes",
                str(out / "result.json"), "-o", str(out / "render.png")) == 0
    assert load_png(out / "render.png").shape == (8, 8, 3)


def test_freeze_pose_needs_a_pose(workspace, capsys):
    image = workspace / "data" / "obj_0000" / "rgb" / "000000.png"
    code = _run(workspace, "invert", str(workspace / "train" / "model.ckpt"), str(image), "--freeze-pose",
                "-o", str(workspace / "frozen"))
    assert code == 1
    assert "error[config]: --freeze-pose needs --pose" in capsys.readouterr().err


def test_frozen_pose_is_kept(workspace):
    pose = workspace / "pose.json"
    pose.write_text(json.dumps({"phi": 0.5, "theta": 0.3, "rho": 2.5}))
    image = workspace / "data" / "obj_0000" / "rgb" / "000000.png"
    out = workspace / "frozen_ok"
    assert _run(workspace, "invert", str(workspace / "train" / "model.ckpt"), str(image),
                "--pose", str(pose), "--freeze-pose", "-o", str(out)) == 0
    result = json.loads((out / "result.json").read_text())
    assert result["poses"][0] == pytest.approx({"phi": 0.5, "theta": 0.3, "rho": 2.5})


def test_malformed_pose_json(workspace, capsys):
    bad = workspace / "bad_pose.json"
    bad.write_text('{"phi": 0.1}')
    code = _run(workspace, "render", str(workspace / "train" / "model.ckpt"), "--pose", str(bad),
                "-o", str(workspace / "bad.png"))
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error[config]: malformed pose JSON")
    assert len(err.strip().splitlines()) == 1


def test_edit_endpoints_match_object_renders(workspace):
    ckpt = str(workspace / "train" / "model.ckpt")
    out = workspace / "edit"
    assert _run(workspace, "edit", ckpt, "obj_0000", "obj_0001", "--code", "texture", "--alphas", "0,1",
                "-o", str(out)) == 0
    assert _run(workspace, "render", ckpt, "--object", "obj_0000", "-o", str(out / "a.png")) == 0
    assert (load_png(out / "texture_00.png") == load_png(out / "a.png")).all()
    assert load_png(out / "texture_sweep.png").shape == (8, 16, 3)


def test_edit_default_steps(workspace):
    out = workspace / "edit_steps"
    assert _run(workspace, "edit", str(workspace / "train" / "model.ckpt"), "obj_0000", "obj_0001",
                "--steps", "3", "-o", str(out)) == 0
    assert sorted(p.name for p in out.iterdir()) == ["shape_00.png", "shape_01.png", "shape_02.png",
                                                     "shape_sweep.png"]


def test_mesh_export(workspace):
    out = workspace / "mesh"
    assert _run(workspace, "mesh", str(workspace / "train" / "model.ckpt"), "--object", "obj_0000",
                "--resolution", "12", "-o", str(out)) == 0
    assert (out / "mesh.ply").stat().st_size > 0
    assert (out / "mesh.obj").stat().st_size > 0


def test_eval_report(workspace):
    out = workspace / "eval"
    assert _run(workspace, "eval", str(workspace / "train" / "model.ckpt"), "--data", str(workspace / "data"),
                "-o", str(out)) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["summary"]["views"] == 4
    assert [row["object"] for row in report["views"]] == ["obj_0000", "obj_0000", "obj_0001", "obj_0001"]
    assert all(row["ssim"] is None for row in report["views"])
    assert (out / "report.csv").exists()


def test_eval_with_inversion(workspace):
    out = workspace / "eval_invert"
    assert _run(workspace, "eval", str(workspace / "train" / "model.ckpt"), "--data", str(workspace / "data"),
                "--invert", "-o", str(out)) == 0
    report = json.loads((out / "report.json").read_text())
    assert all("rot_deg" in row for row in report["views"])
    assert report["summary"]["count"] == 4
    assert 0.0 <= report["summary"]["inlier_fraction"] <= 1.0


def test_invalid_config_value(workspace, capsys):
    code = _run(workspace, "dataset", "gen", "--objects", "0", "-o", str(workspace / "none"))
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error[config]: data.objects")


def test_unknown_config_key(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"train": {"iters": 5}}))
    assert main(["--config", str(config), "dataset", "gen", "-o", str(tmp_path / "d")]) == 1
    assert "error[config]: train.iters" in capsys.readouterr().err


def test_data_root_from_environment(workspace, monkeypatch):
    monkeypatch.setenv("DUOFIELD_DATA_ROOT", str(workspace / "data"))
    out = workspace / "env_eval"
    assert _run(workspace, "eval", str(workspace / "train" / "model.ckpt"), "-o", str(out)) == 0
    assert json.loads((out / "report.json").read_text())["summary"]["views"] == 4
