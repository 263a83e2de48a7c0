"""End-to-end reconstruction experiments on synthetic scenes.

These take minutes to tens of minutes on a desk CPU and are deselected by
default; run them with ``pytest -m slow``.
"""

import numpy as np
import pytest

from quadrecon.config import FourierSettings, HashGridSettings, IlluminationSpec, PrimitiveSpec, SceneSpec, TrainConfig
from quadrecon.dataset import load_dataset
from quadrecon.evaluation import evaluate, psnr
from quadrecon.illumination import SGLighting
from quadrecon.render import render_image
from quadrecon.scenegen import generate_scene, render_oracle
from quadrecon.trainer import Trainer

pytestmark = pytest.mark.slow


def desk_config(**update):
    base = TrainConfig(
        grid=HashGridSettings(levels=8, table_size=2**14, base_resolution=8, max_resolution=128, init_scale=1e-2),
        fourier=FourierSettings(num_frequencies=6, hidden_width=32),
        n_samples=32,
        patch_size=16,
        patches_per_step=4,
        resolution_start=32,
        resolution_end=64,
        random_ray_steps=200,
        holdout_views=["view_004", "view_010", "view_016", "view_022"],
        holdout_steps=200,
        log_every=250,
    )
    return base.model_copy(update=update)


@pytest.fixture(scope="module")
def sphere_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("sphere24")
    spec = SceneSpec(primitives=[PrimitiveSpec(kind="sphere", size=(0.5,), texture_scale=3.0)], width=64, height=64)
    generate_scene(spec, 24, 0, root)
    return root


class TestReconstruction:
    def test_gt_poses(self, sphere_scene):
        trainer = Trainer(desk_config(total_steps=5000, pose_init="gt", multiplex_size=1), load_dataset(sphere_scene))
        trainer.train()
        trainer.holdout()
        report = evaluate(trainer)
        assert report.mean_psnr >= 30.0
        assert report.mean_ssim >= 0.9

    def test_pose_refinement(self, sphere_scene):
        trainer = Trainer(desk_config(total_steps=10000, pose_init="perturbed", multiplex_size=1), load_dataset(sphere_scene))
        trainer.train()
        report = evaluate(trainer)
        assert report.poses.rotation_error_mean <= 5.0
        assert report.poses.translation_error_mean <= 0.05
        assert report.poses.rotation_error_mean * 3.0 <= report.initial_poses.rotation_error_mean

    def test_quadrant_initialization(self, box_dataset):
        trainer = Trainer(desk_config(total_steps=10000, pose_init="quadrant", multiplex_size=4), box_dataset)
        before = evaluate(trainer, views=[]).poses.rotation_error_mean
        trainer.train()
        trainer.holdout()
        report = evaluate(trainer)
        assert report.poses.rotation_error_mean <= 0.5 * before
        assert report.mean_psnr >= 25.0


@pytest.fixture(scope="module")
def box_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("box24")
    spec = SceneSpec(primitives=[PrimitiveSpec(kind="box", size=(0.4, 0.3, 0.35), texture_scale=5.0)], width=64, height=64)
    generate_scene(spec, 24, 1, root)
    return load_dataset(root)


class TestAblation:
    @pytest.fixture(scope="class")
    def full_run_error(self, box_dataset):
        trainer = Trainer(desk_config(total_steps=10000, pose_init="quadrant", multiplex_size=4), box_dataset)
        trainer.train()
        return evaluate(trainer, views=[]).poses.rotation_error_mean

    @pytest.mark.parametrize("switch", ["anneal_encoding", "patch_losses"])
    def test_disabling_worsens_pose_recovery(self, box_dataset, full_run_error, switch):
        config = desk_config(total_steps=10000, pose_init="quadrant", multiplex_size=4, **{switch: False})
        trainer = Trainer(config, box_dataset)
        trainer.train()
        assert evaluate(trainer, views=[]).poses.rotation_error_mean > full_run_error


class TestDecomposition:
    def test_half_metallic_sphere_and_relighting(self, tmp_path):
        split = PrimitiveSpec(kind="sphere", size=(0.5,), texture="solid", metallic=0.9, roughness=0.3, metallic_split=True)
        spec = SceneSpec(primitives=[split], width=64, height=64)
        generate_scene(spec, 24, 2, tmp_path)
        dataset = load_dataset(tmp_path)
        trainer = Trainer(desk_config(total_steps=5000, pose_init="gt", multiplex_size=1, holdout_views=[]), dataset)
        trainer.train()

        field = trainer.state.field
        rng = np.random.default_rng(0)
        directions = rng.normal(size=(400, 3))
        points = 0.5 * directions / np.linalg.norm(directions, axis=1, keepdims=True)
        _, metallic, _ = field.brdf_at(points)
        metal = metallic.data[:, 0]
        assert metal[points[:, 0] > 0].mean() - metal[points[:, 0] < 0].mean() >= 0.3

        view = dataset.views[0]
        swapped = IlluminationSpec.read(tmp_path / "illumination" / f"{dataset.views[5].name}.json")
        pose = trainer.state.pose(0)
        oracle = render_oracle(spec, pose, swapped)

        relit = render_image(field, pose, SGLighting.from_spec(swapped), 0, (view.width, view.height), 0.0, trainer.config.n_samples)
        rgb = np.clip(relit["rgb"], 0.0, 1.0) * oracle.mask[:, :, None]
        assert psnr(rgb, np.clip(oracle.image, 0.0, 1.0)) >= 25.0


class TestDeterminism:
    def test_loss_trace_reproduces(self, sphere_scene):
        dataset = load_dataset(sphere_scene)
        config = desk_config(total_steps=100, pose_init="perturbed", multiplex_size=2, random_ray_steps=20)
        a, b = Trainer(config, dataset), Trainer(config, dataset)
        a.train()
        b.train()
        np.testing.assert_allclose([r.total for r in a.history], [r.total for r in b.history], rtol=0, atol=1e-12)
