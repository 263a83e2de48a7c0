import numpy as np
import pytest

from conftest import numeric_gradient
from quadrecon.autodiff import Tape, Tensor, no_record, ops
from quadrecon.field import FieldNetwork, normals_from_gradient, normals_of_density


@pytest.fixture
def field(tiny_config):
    return FieldNetwork(tiny_config, 4, np.random.default_rng(5))


@pytest.fixture
def points(rng):
    return rng.uniform(-0.8, 0.8, size=(10, 3))


class TestNormalsOfDensity:
    def test_sphere_density_points_outward(self, rng):
        x = rng.normal(size=(20, 3))
        normals, degenerate = normals_of_density(lambda p: 1.0 - ops.norm(p, axis=-1), x)
        np.testing.assert_allclose(normals, x / np.linalg.norm(x, axis=-1, keepdims=True), atol=1e-12)
        assert not degenerate.any()

    def test_flat_density_is_degenerate(self):
        x = np.zeros((3, 3))
        normals, degenerate = normals_of_density(lambda p: ops.sum_(p * 0.0, axis=-1) + 1.0, x)
        assert degenerate.all()
        np.testing.assert_array_equal(normals, np.tile([0.0, 0.0, 1.0], (3, 1)))

    def test_mixed_rows_only_flag_small_gradients(self):
        grad = Tensor(np.array([[0.0, 3.0, 4.0], [1e-12, 0.0, 0.0]]))
        normal, degenerate = normals_from_gradient(grad)
        np.testing.assert_array_equal(degenerate, [False, True])
        np.testing.assert_allclose(normal.data, [[0.0, -0.6, -0.8], [0.0, 0.0, 1.0]])


class TestFieldNetwork:
    def test_head_ranges(self, field, points, rng):
        dirs = rng.normal(size=points.shape)
        out = field.evaluate(points, d=dirs, image_index=2, normals=True, brdf=True)
        assert out.sigma.shape == (10,)
        assert np.all(out.sigma.data >= 0.0)
        for t in (out.radiance, out.basecolor):
            assert t.shape == (10, 3)
            assert np.all((t.data > 0.0) & (t.data < 1.0))
        for t in (out.metallic, out.roughness):
            assert t.shape == (10, 1)
        np.testing.assert_allclose(np.linalg.norm(out.normal.data, axis=-1), 1.0)
        assert out.has_brdf

    def test_normals_follow_negative_density_gradient(self, field, points):
        normals, degenerate = field.normal_at(points)
        assert not degenerate.any()
        for i in range(3):
            p = points[i : i + 1].copy()

            def density():
                with no_record():
                    return float(field.density_at(p).data[0])

            g = numeric_gradient(density, p, eps=1e-6)[0]
            np.testing.assert_allclose(normals[i], -g / np.linalg.norm(g), rtol=1e-3, atol=1e-5)

    def test_shading_loss_reaches_trunk_through_normals(self, field, points):
        with Tape() as tape:
            out = field.evaluate(points, normals=True)
            loss = ops.sum_(out.normal * np.array([0.3, -0.2, 0.9]))
        grads = tape.gradient(loss, field.trunk[0].parameters())
        assert any(np.abs(g.data).sum() > 0 for g in grads)

    def test_mean_embedding_without_image_index(self, field, points):
        field.embeddings.data[:] = np.arange(32, dtype=np.float64).reshape(4, 8) / 32.0
        mean_color, _, _ = field.brdf_at(points)
        field.embeddings.data[:] = field.embeddings.data.mean(axis=0)
        indexed_color, _, _ = field.brdf_at(points, image_index=1)
        np.testing.assert_allclose(mean_color.data, indexed_color.data)

    def test_embeddings_change_only_basecolor(self, field, points):
        _, metallic_a, roughness_a = field.brdf_at(points, image_index=0)
        field.embeddings.data[3] = 5.0
        color_b, metallic_b, roughness_b = field.brdf_at(points, image_index=3)
        color_a, _, _ = field.brdf_at(points, image_index=0)
        np.testing.assert_allclose(metallic_a.data, metallic_b.data)
        np.testing.assert_allclose(roughness_a.data, roughness_b.data)
        assert not np.allclose(color_a.data, color_b.data)

    def test_brdf_parameters_include_embeddings(self, field):
        params = field.brdf_parameters()
        assert any(p is field.embeddings for p in params)
        assert not any(p is field.density_head.weight for p in params)

    def test_annealing_changes_density(self, field, points):
        field.set_annealing(0.0, 0.0)
        coarse = field.density_at(points).data
        field.set_annealing(None, None)
        full = field.density_at(points).data
        assert not np.allclose(coarse, full)
