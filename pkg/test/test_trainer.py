import csv

import numpy as np
import pytest

from quadrecon.cameras import read_pose_blocks
from quadrecon.errors import NonFiniteError
from quadrecon.illumination import SGLighting
from quadrecon.losses import METRIC_COLUMNS
from quadrecon.trainer import CHECKPOINT_NAME, METRICS_NAME, POSES_NAME, ReconstructionState, Trainer, summarize


def explode(*args, **kwargs):
    raise NonFiniteError("exp")


def snapshot(trainer):
    return trainer.state.field_checksum(), trainer.state.poses()


def assert_same_poses(a, b):
    assert list(a) == list(b)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


class TestTrainStep:
    def test_step_updates_parameters(self, tiny_config, mini_dataset):
        trainer = Trainer(tiny_config, mini_dataset)
        before = trainer.state.field_checksum()
        report = trainer.train_step()
        assert not report.rejected
        assert report.step == 0 and trainer.step == 1
        assert len(report.image_ids) == tiny_config.patches_per_step
        assert np.isfinite(report.total)
        assert trainer.state.field_checksum() != before

    def test_same_seed_same_result(self, tiny_config, mini_dataset):
        a, b = Trainer(tiny_config, mini_dataset), Trainer(tiny_config, mini_dataset)
        a.train(3)
        b.train(3)
        assert [r.total for r in a.history] == [r.total for r in b.history]
        checksum_a, poses_a = snapshot(a)
        checksum_b, poses_b = snapshot(b)
        assert checksum_a == checksum_b
        assert_same_poses(poses_a, poses_b)

    def test_non_finite_step_is_rejected(self, tiny_config, mini_dataset, monkeypatch):
        trainer = Trainer(tiny_config, mini_dataset)
        checksum, poses = snapshot(trainer)

        monkeypatch.setattr("quadrecon.trainer.loop.render_rays", explode)
        report = trainer.train_step()
        assert report.rejected
        assert trainer.rejected == 1
        assert trainer.step == 1
        assert trainer.state.field_checksum() == checksum
        assert_same_poses(trainer.state.poses(), poses)

    def test_rejected_step_keeps_every_multiplex_member(self, tiny_config, mini_dataset, monkeypatch):
        trainer = Trainer(tiny_config, mini_dataset)
        trainer.step = tiny_config.total_steps - 1
        uids = [list(trainer.state.multiplexes[i].uids) for i in trainer.train_ids]

        with monkeypatch.context() as patch:
            patch.setattr("quadrecon.trainer.loop.render_rays", explode)
            report = trainer.train_step()
        assert report.rejected and report.multiplex_size == 1
        assert [list(trainer.state.multiplexes[i].uids) for i in trainer.train_ids] == uids

        trainer.step = tiny_config.total_steps - 1
        report = trainer.train_step()
        assert not report.rejected
        assert all(len(trainer.state.multiplexes[i]) == 1 for i in trainer.train_ids)

    def test_train_stops_at_total_steps(self, tiny_config, mini_dataset):
        trainer = Trainer(tiny_config.model_copy(update={"total_steps": 2}), mini_dataset)
        trainer.train(10)
        assert trainer.step == 2
        assert len(trainer.history) == 2


class TestHoldout:
    @pytest.fixture
    def config(self, tiny_config):
        return tiny_config.model_copy(update={"holdout_every": 2})

    def test_held_out_views_are_not_trained(self, config, mini_dataset):
        trainer = Trainer(config, mini_dataset)
        assert trainer.holdout_ids == [1, 3]
        assert len(trainer.state.multiplexes[1]) == 1
        lights = [p.data.copy() for p in trainer.state.lights[1].parameters()]
        pose = trainer.state.pose(3).matrix()
        trainer.train(2)
        assert all(set(r.image_ids) <= {"view_000", "view_002"} for r in trainer.history)
        for old, new in zip(lights, trainer.state.lights[1].parameters()):
            np.testing.assert_array_equal(old, new.data)
        np.testing.assert_array_equal(trainer.state.pose(3).matrix(), pose)

    def test_holdout_leaves_field_untouched(self, config, mini_dataset):
        trainer = Trainer(config, mini_dataset)
        trainer.train(2)
        result = trainer.holdout()
        assert result.views == ["view_001", "view_003"]
        assert result.checksum_before == result.checksum_after
        assert set(result.final_losses) <= {"view_001", "view_003"}


class TestPersistence:
    def test_state_round_trip(self, tiny_config, mini_dataset):
        trainer = Trainer(tiny_config, mini_dataset)
        trainer.train(1)
        restored = ReconstructionState.from_checkpoint(trainer.checkpoint())
        assert restored.field_checksum() == trainer.state.field_checksum()
        assert_same_poses(restored.poses(), trainer.state.poses())
        assert restored.names == trainer.state.names

    def test_resume_matches_uninterrupted_run(self, tiny_config, mini_dataset, tmp_path):
        straight = Trainer(tiny_config, mini_dataset)
        straight.train(4)

        first = Trainer(tiny_config, mini_dataset)
        first.train(2)
        first.save(tmp_path / CHECKPOINT_NAME)
        resumed = Trainer.resume(tmp_path / CHECKPOINT_NAME, mini_dataset)
        assert resumed.step == 2
        resumed.train(2)

        assert resumed.state.field_checksum() == straight.state.field_checksum()
        assert_same_poses(resumed.state.poses(), straight.state.poses())
        assert resumed.history[-1].total == straight.history[-1].total

    def test_metrics_csv(self, tiny_config, mini_dataset, tmp_path):
        trainer = Trainer(tiny_config, mini_dataset, out_dir=tmp_path)
        trainer.train(2)
        with (tmp_path / METRICS_NAME).open() as handle:
            reader = csv.DictReader(handle)
            rows = list(reader)
        assert reader.fieldnames == METRIC_COLUMNS
        assert [row["step"] for row in rows] == ["0", "1"]
        assert all(row["rejected"] == "0" for row in rows)

    def test_export(self, tiny_config, mini_dataset, tmp_path):
        trainer = Trainer(tiny_config, mini_dataset)
        trainer.train(1)
        out = trainer.export(tmp_path / "export")
        assert (out / CHECKPOINT_NAME).is_file()
        assert list(read_pose_blocks(out / POSES_NAME)) == mini_dataset.names
        for name in mini_dataset.names:
            assert (out / "illumination" / f"{name}.json").is_file()


class TestSummarize:
    def test_ignores_rejected_steps(self, tiny_config, mini_dataset, monkeypatch):
        trainer = Trainer(tiny_config, mini_dataset)
        trainer.train(1)
        monkeypatch.setattr("quadrecon.trainer.loop.render_rays", explode)
        trainer.train(1)
        summary = summarize(trainer.history)
        assert summary["total"] == pytest.approx(trainer.history[0].total)
        assert summary["rejected"] == 1.0
        assert summary["steps"] == 2.0

    def test_empty_history(self):
        assert summarize([]) == {}


class TestLighting:
    def test_views_have_sg_mixtures(self, tiny_config, mini_dataset):
        trainer = Trainer(tiny_config, mini_dataset)
        lighting = trainer.state.lighting(0)
        assert isinstance(lighting, SGLighting)
        assert lighting.axes.shape == (tiny_config.sg_lobes, 3)
