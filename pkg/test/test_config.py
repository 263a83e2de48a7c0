import pytest

from quadrecon.config import (
    IlluminationSpec,
    ManifestRecord,
    PrimitiveSpec,
    SceneSpec,
    TrainConfig,
    config_hash,
    load_config,
    parse_overrides,
)
from quadrecon.errors import ConfigError, SceneSpecError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# tiny run\ntotal_steps=100\nseed=7\nGRID_LEVELS=4\nfourier_num_frequencies=6\nholdout_views=view_001, view_003\n")
    return path


class TestLoadConfig:
    def test_defaults(self):
        assert load_config() == TrainConfig()

    def test_file_values(self, config_file):
        config = load_config(config_file)
        assert config.total_steps == 100
        assert config.seed == 7
        assert config.grid.levels == 4
        assert config.fourier.num_frequencies == 6
        assert config.holdout_views == ["view_001", "view_003"]

    def test_overrides_win(self, config_file):
        assert load_config(config_file, {"total_steps": "50"}).total_steps == 50

    def test_specular_energy_cap_is_opt_in(self):
        assert not TrainConfig().shading_energy_cap
        assert load_config(overrides={"shading_energy_cap": "true"}).shading_energy_cap

    def test_environment_reference(self, monkeypatch):
        monkeypatch.setenv("QUADRECON_TEST_STEPS", "77")
        assert load_config(overrides={"total_steps": "env:QUADRECON_TEST_STEPS"}).total_steps == 77

    def test_unset_environment_reference_fails_validation(self, monkeypatch):
        monkeypatch.delenv("QUADRECON_TEST_UNSET", raising=False)
        with pytest.raises(ConfigError):
            load_config(overrides={"total_steps": "env:QUADRECON_TEST_UNSET"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.env")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"lr_network": "-1"},
            {"no_such_key": "1"},
            {"grid_table_size": "1000"},
            {"focal_unlock_fraction": "0.5"},
            {"bounds_r_min": "5"},
            {"resolution_start": "500"},
            {"pose_init": "guess"},
        ],
    )
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError):
            load_config(overrides=overrides)


class TestOverrides:
    def test_parse(self):
        assert parse_overrides(["a=1", " b = x=y "]) == {"a": "1", "b": "x=y"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_overrides(["steps"])


class TestConfigHash:
    def test_stable_and_sensitive(self):
        assert config_hash(TrainConfig()) == config_hash(TrainConfig())
        assert config_hash(TrainConfig(seed=1)) != config_hash(TrainConfig())


class TestDerivedSettings:
    def test_grid_resolutions(self):
        grid = TrainConfig().grid.model_copy(update={"levels": 3, "base_resolution": 4, "max_resolution": 16})
        assert [grid.resolution(level) for level in range(3)] == [4, 8, 16]
        assert grid.output_dim == 6

    def test_importance_start_defaults_to_half_the_annealing(self):
        assert TrainConfig(anneal_end_fraction=0.4).importance_start == pytest.approx(0.2)
        assert TrainConfig(importance_start_fraction=0.1).importance_start == 0.1


class TestSceneFiles:
    def test_manifest_line_round_trip(self):
        record = ManifestRecord.from_line("images/a.png masks/a.png 64 48 - raf")
        assert record.pose_ref is None
        assert record.quadrant == "RAF"
        assert ManifestRecord.from_line(record.to_line()) == record

    def test_bad_quadrant(self):
        with pytest.raises(ValueError):
            ManifestRecord.from_line("a.png m.png 4 4 a XYZ")

    def test_primitive_size_checked(self):
        with pytest.raises(ValueError):
            PrimitiveSpec(kind="box", size=(0.5,))

    def test_lobe_axis_is_normalized(self):
        spec = IlluminationSpec.model_validate({"lobes": [{"axis": (0, 3, 4), "sharpness": 10, "color": (1, 1, 1)}]})
        assert spec.lobes[0].axis == pytest.approx((0.0, 0.6, 0.8))

    def test_unreadable_scene(self, tmp_path):
        (tmp_path / "scene.json").write_text("{not json")
        with pytest.raises(SceneSpecError):
            SceneSpec.read(tmp_path / "scene.json")

    def test_unreadable_illumination(self, tmp_path):
        with pytest.raises(ConfigError):
            IlluminationSpec.read(tmp_path / "absent.json")
