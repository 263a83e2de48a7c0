import pytest

from quadrecon.config import TrainConfig
from quadrecon.trainer import schedule_at
from quadrecon.trainer.schedule import multiplex_size_at, smoothstep


@pytest.fixture
def config():
    return TrainConfig(total_steps=300, random_ray_steps=10, multiplex_size=4, resolution_start=100, resolution_end=400)


class TestSchedule:
    def test_start(self, config):
        s = schedule_at(0, config)
        assert s.lambda_b == 1.0
        assert s.lambda_a == 1.0
        assert s.alpha_grid == 0.0 and s.alpha_fourier == 0.0
        assert s.resolution == 100
        assert s.multiplex_size == 4
        assert not s.focal_unlocked
        assert not s.importance_active
        assert s.random_rays
        assert not s.brdf_active

    def test_end_of_annealing(self, config):
        s = schedule_at(100, config)
        assert s.alpha_grid == config.grid.levels
        assert s.alpha_fourier == config.fourier.num_frequencies
        assert s.lambda_b == 0.0 and s.lambda_a == 0.0
        assert s.brdf_active

    def test_end_of_ramp(self, config):
        s = schedule_at(150, config)
        assert s.multiplex_size == 1
        assert s.resolution == 400
        assert s.lambda_c == 0.0

    def test_midway_values(self, config):
        s = schedule_at(75, config)
        assert s.multiplex_size == 2
        assert s.resolution == 250
        assert s.focal_unlocked
        assert not schedule_at(74, config).focal_unlocked
        assert schedule_at(50, config).lambda_a == pytest.approx(0.5)
        assert schedule_at(74, config).multiplex_size == 4

    def test_multiplex_halves_until_the_ramp_ends(self, config):
        config = config.model_copy(update={"multiplex_size": 8})
        sizes = [schedule_at(step, config).multiplex_size for step in range(0, 151)]
        assert sorted(set(sizes), reverse=True) == [8, 4, 2, 1]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))
        assert sizes[51] == 4 and sizes[101] == 2 and sizes[150] == 1
        assert sizes[49] == 8 and sizes[99] == 4 and sizes[149] == 2

    @pytest.mark.parametrize("m, expected", [(1, [1, 1, 1, 1]), (3, [3, 3, 1, 1]), (6, [6, 3, 1, 1])])
    def test_halving_for_other_sizes(self, m, expected):
        assert [multiplex_size_at(m, ramp) for ramp in (0.1, 0.4, 0.7, 1.0)] == expected

    def test_importance_starts_halfway_through_annealing(self, config):
        assert not schedule_at(49, config).importance_active
        assert schedule_at(50, config).importance_active

    def test_random_rays_then_patches(self, config):
        assert schedule_at(9, config).random_rays
        assert not schedule_at(10, config).random_rays
        assert schedule_at(200, config.model_copy(update={"patch_losses": False})).random_rays

    def test_resolution_capped_by_native_size(self, config):
        assert schedule_at(300, config, native_long_side=64).resolution == 64

    def test_no_annealing(self, config):
        s = schedule_at(10, config.model_copy(update={"anneal_encoding": False}))
        assert s.alpha_grid is None and s.alpha_fourier is None

    def test_step_out_of_range(self, config):
        with pytest.raises(ValueError):
            schedule_at(301, config)

    def test_smoothstep(self):
        assert smoothstep(-1.0) == 0.0
        assert smoothstep(0.5) == 0.5
        assert smoothstep(2.0) == 1.0
