from unittest.mock import patch

import pytest
from typer.testing import CliRunner

from quadrecon.cli import app

runner = CliRunner()

TINY = """\
seed=3
pose_init=gt
grid_levels=4
grid_table_size=1024
grid_base_resolution=4
grid_max_resolution=32
grid_init_scale=0.1
fourier_num_frequencies=4
fourier_hidden_width=16
sg_lobes=2
n_samples=8
rays_per_batch=32
patches_per_step=2
patch_size=8
resolution_start=16
resolution_end=32
random_ray_steps=1
multiplex_size=2
holdout_steps=1
log_every=1
"""


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr("quadrecon.cli.configure_logging", lambda **kwargs: None)


@pytest.fixture
def tiny_env(tmp_path):
    path = tmp_path / "tiny.env"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, scene_dir):
    root = tmp_path_factory.mktemp("cli_run")
    (root / "tiny.env").write_text(TINY)
    args = ["train", str(scene_dir), "--out", str(root / "run"), "--steps", "2", "--config", str(root / "tiny.env")]
    with patch("quadrecon.cli.configure_logging"):
        result = CliRunner().invoke(app, args + ["--set", "holdout_views=view_003"])
    assert result.exit_code == 0, result.output
    return root / "run"


class TestGen:
    def test_writes_dataset(self, tmp_path):
        out = tmp_path / "scene"
        result = runner.invoke(app, ["gen", "--out", str(out), "--views", "4", "--seed", "2", "--set", "width=16", "--set", "height=16"])
        assert result.exit_code == 0, result.output
        assert (out / "manifest.txt").is_file()
        assert len(list((out / "images").glob("*.png"))) == 4

    def test_too_few_views_is_a_structured_error(self, tmp_path):
        result = runner.invoke(app, ["gen", "--out", str(tmp_path / "scene"), "--views", "2"])
        assert result.exit_code == 1

    def test_bad_scene_override(self, tmp_path):
        result = runner.invoke(app, ["gen", "--out", str(tmp_path / "scene"), "--set", "width=2"])
        assert result.exit_code == 1


class TestTrain:
    def test_run_directory(self, trained_run):
        for name in ("checkpoint.qrck", "metrics.csv", "poses.txt"):
            assert (trained_run / name).is_file()
        assert (trained_run / "illumination" / "view_003.json").is_file()

    def test_missing_dataset_argument(self, tiny_env):
        result = runner.invoke(app, ["train", "--config", str(tiny_env)])
        assert result.exit_code == 1


class TestRender:
    def test_single_view_with_hdr(self, trained_run, tmp_path):
        out = tmp_path / "renders"
        result = runner.invoke(
            app, ["render", str(trained_run / "checkpoint.qrck"), "--out", str(out), "--view", "view_000", "--samples", "4", "--hdr"]
        )
        assert result.exit_code == 0, result.output
        assert [p.name for p in out.glob("*.png")] == ["view_000.png"]
        assert (out / "view_000.depth.f32.json").is_file()

    def test_turntable_with_material_edit(self, trained_run, tmp_path):
        out = tmp_path / "turntable"
        result = runner.invoke(
            app,
            ["render", str(trained_run / "checkpoint.qrck"), "--out", str(out), "--turntable", "2", "--samples", "4", "--basecolor", "0.5", "--roughness", "0.3"],
        )
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out.glob("*.png")) == ["turntable_000.png", "turntable_001.png"]

    def test_unknown_view(self, trained_run, tmp_path):
        result = runner.invoke(app, ["render", str(trained_run / "checkpoint.qrck"), "--out", str(tmp_path), "--view", "ghost"])
        assert result.exit_code != 0

    def test_bad_basecolor(self, trained_run, tmp_path):
        result = runner.invoke(app, ["render", str(trained_run / "checkpoint.qrck"), "--out", str(tmp_path), "--basecolor", "2,0,0"])
        assert result.exit_code == 2


class TestEval:
    def test_untrained_reconstruction(self, scene_dir, tiny_env, tmp_path):
        result = runner.invoke(
            app,
            ["eval", str(scene_dir), "--config", str(tiny_env), "--set", "holdout_views=view_002", "--holdout-steps", "0", "--out", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output
        lines = (tmp_path / "eval.csv").read_text().splitlines()
        assert lines[0] == "view,psnr,ssim"
        assert lines[1].startswith("view_002,")

    def test_from_checkpoint(self, scene_dir, trained_run, tiny_env, tmp_path):
        result = runner.invoke(
            app,
            ["eval", str(scene_dir), "--checkpoint", str(trained_run / "checkpoint.qrck"), "--config", str(tiny_env), "--out", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "eval.csv").read_text().splitlines()[1].startswith("view_003,")

    def test_bad_override_exits_1(self, scene_dir, tmp_path):
        result = runner.invoke(app, ["eval", str(scene_dir), "--set", "steps", "--out", str(tmp_path)])
        assert result.exit_code == 1


class TestMesh:
    def test_untrained_field_has_no_surface(self, tiny_env, tmp_path):
        result = runner.invoke(
            app, ["mesh", "--config", str(tiny_env), "--resolution", "16", "--threshold", "1e9", "--out", str(tmp_path / "m.ply")]
        )
        assert result.exit_code == 1
        assert not (tmp_path / "m.ply").exists()

    def test_huge_threshold(self, trained_run, tmp_path):
        result = runner.invoke(
            app, ["mesh", str(trained_run / "checkpoint.qrck"), "--resolution", "16", "--threshold", "1e9", "--out", str(tmp_path / "m.ply")]
        )
        assert result.exit_code == 1

    def test_resolution_below_floor_is_a_usage_error(self, tiny_env, tmp_path):
        result = runner.invoke(app, ["mesh", "--config", str(tiny_env), "--resolution", "8"])
        assert result.exit_code == 2


class TestUsage:
    def test_missing_config_file(self, tmp_path):
        result = runner.invoke(app, ["mesh", "--config", str(tmp_path / "absent.env")])
        assert result.exit_code == 2
