import shutil

import numpy as np
import pytest

from quadrecon.cameras import QuadrantLabel
from quadrecon.config import TrainConfig
from quadrecon.dataset import load_dataset
from quadrecon.errors import ConfigError, DatasetError
from quadrecon.imageio import write_mask


@pytest.fixture
def scene_copy(scene_dir, tmp_path):
    root = tmp_path / "scene"
    shutil.copytree(scene_dir, root)
    return root


def rewrite_manifest(root, edit):
    path = root / "manifest.txt"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(edit(lines)) + "\n")


def drop_pose_ref(line):
    if line.startswith("#"):
        return line
    parts = line.split()
    parts[4] = "-"
    return " ".join(parts)


class TestLoadDataset:
    def test_views(self, mini_dataset):
        assert len(mini_dataset) == 4
        assert mini_dataset.names == ["view_000", "view_001", "view_002", "view_003"]
        assert mini_dataset.has_gt_poses
        assert mini_dataset.native_long_side == 32
        for view in mini_dataset.views:
            assert view.image.shape == (32, 32, 3)
            assert view.mask.shape == (32, 32)
            assert view.gt_pose.shape == (3, 4)
            assert view.init_pose.shape == (3, 4)
            assert view.illumination is not None

    def test_labels_come_from_the_manifest(self, mini_dataset):
        assert mini_dataset.views[3].quadrant == QuadrantLabel(right=True, above=True, front=False)

    def test_quadrant_sidecar_overrides_manifest(self, scene_copy):
        text = (scene_copy / "quadrants.txt").read_text().replace("view_000 L B K", "view_000 R A F")
        (scene_copy / "quadrants.txt").write_text(text)
        dataset = load_dataset(scene_copy)
        assert dataset.views[0].quadrant == QuadrantLabel(right=True, above=True, front=True)

    def test_without_gt_poses(self, scene_copy):
        (scene_copy / "poses_gt.txt").unlink()
        rewrite_manifest(scene_copy, lambda lines: [drop_pose_ref(line) for line in lines])
        dataset = load_dataset(scene_copy)
        assert not dataset.has_gt_poses


class TestResolution:
    def test_shapes_and_masked_target(self, mini_dataset):
        view = mini_dataset.views[0]
        image, mask = view.at_resolution(16)
        assert image.shape == (16, 16, 3) and mask.shape == (16, 16)
        assert set(np.unique(mask)) <= {0.0, 1.0}
        np.testing.assert_array_equal(image[mask == 0], 0.0)

    def test_cached(self, mini_dataset):
        view = mini_dataset.views[1]
        assert view.at_resolution(16)[0] is view.at_resolution(16)[0]

    def test_never_upsamples(self, mini_dataset):
        assert mini_dataset.views[0].size_at(64) == (32, 32)


class TestSplit:
    def test_holdout_every(self, mini_dataset):
        train, held = mini_dataset.split(TrainConfig(holdout_every=2))
        assert train == [0, 2]
        assert held == [1, 3]

    def test_named_holdout(self, mini_dataset):
        train, held = mini_dataset.split(TrainConfig(holdout_views=["view_002"]))
        assert held == [2]
        assert train == [0, 1, 3]

    def test_unknown_view(self, mini_dataset):
        with pytest.raises(ConfigError):
            mini_dataset.split(TrainConfig(holdout_views=["nope"]))

    def test_everything_held_out(self, mini_dataset):
        with pytest.raises(ConfigError):
            mini_dataset.split(TrainConfig(holdout_every=1))


class TestDatasetErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_bad_record(self, scene_copy):
        rewrite_manifest(scene_copy, lambda lines: lines + ["images/view_000.png masks/view_000.png 32"])
        with pytest.raises(DatasetError) as exc:
            load_dataset(scene_copy)
        assert "line 6" in str(exc.value)

    def test_duplicate_image(self, scene_copy):
        rewrite_manifest(scene_copy, lambda lines: lines + [lines[1]])
        with pytest.raises(DatasetError):
            load_dataset(scene_copy)

    def test_missing_pose_reference(self, scene_copy):
        rewrite_manifest(scene_copy, lambda lines: [lines[0], lines[1].replace(" view_000 ", " ghost ")] + lines[2:])
        with pytest.raises(DatasetError) as exc:
            load_dataset(scene_copy)
        assert "ghost" in str(exc.value)

    def test_size_mismatch(self, scene_copy):
        rewrite_manifest(scene_copy, lambda lines: [lines[0], lines[1].replace(" 32 32 ", " 32 30 ")] + lines[2:])
        with pytest.raises(DatasetError):
            load_dataset(scene_copy)

    def test_mask_size_mismatch(self, scene_copy):
        write_mask(scene_copy / "masks" / "view_001.png", np.ones((16, 16)))
        with pytest.raises(DatasetError):
            load_dataset(scene_copy)

    def test_missing_image(self, scene_copy):
        (scene_copy / "images" / "view_002.png").unlink()
        with pytest.raises(DatasetError) as exc:
            load_dataset(scene_copy)
        assert exc.value.path.endswith("view_002.png")
