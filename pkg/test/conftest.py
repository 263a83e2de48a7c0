import numpy as np
import pytest

from quadrecon.autodiff import Tape, no_record
from quadrecon.config import FourierSettings, HashGridSettings, PrimitiveSpec, SceneSpec, TrainConfig
from quadrecon.dataset import load_dataset
from quadrecon.scenegen import generate_scene


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        plus = f()
        x[idx] = orig - eps
        minus = f()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def assert_gradients(build, params, rtol: float = 1e-4, atol: float = 1e-7, eps: float = 1e-6) -> None:
    """Compare tape gradients of ``sum(build())`` with central differences for every tensor in ``params``."""
    with Tape() as tape:
        out = build()
    analytic = tape.gradient(out, params)

    def scalar() -> float:
        with no_record():
            return float(np.sum(build().data))

    for param, grad in zip(params, analytic):
        expected = numeric_gradient(scalar, param.data, eps)
        np.testing.assert_allclose(grad.data, expected, rtol=rtol, atol=atol)


@pytest.fixture
def grid_settings():
    return HashGridSettings(levels=4, table_size=2**10, features_per_level=2, base_resolution=4, max_resolution=32, init_scale=0.1)


@pytest.fixture
def tiny_config(grid_settings):
    return TrainConfig(
        total_steps=12,
        seed=3,
        grid=grid_settings,
        fourier=FourierSettings(num_frequencies=4, hidden_width=16),
        sg_lobes=2,
        n_samples=16,
        rays_per_batch=64,
        patches_per_step=2,
        patch_size=8,
        resolution_start=16,
        resolution_end=32,
        random_ray_steps=2,
        multiplex_size=2,
        loss_buffer_size=50,
        holdout_steps=2,
        log_every=1,
        pose_init="gt",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    """A four-view 32x32 dataset of a checkered sphere, generated once per session."""
    root = tmp_path_factory.mktemp("scene")
    spec = SceneSpec(primitives=[PrimitiveSpec(kind="sphere", size=(0.5,))], width=32, height=32)
    generate_scene(spec, 4, 11, root)
    return root


@pytest.fixture
def mini_dataset(scene_dir):
    return load_dataset(scene_dir)
