"""
The neural field: hybrid encoding, trunk MLP, density, radiance and BRDF heads.

Surface normals are the normalized negative density gradient. The gradient is
taken with ``create_graph=True`` on the active tape, so losses on shaded color
propagate through the normals into the encoding and trunk parameters.
"""

import logging
from contextlib import ExitStack
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from quadrecon.autodiff import Linear, Module, Tape, Tensor, active_tape, ops
from quadrecon.config import TrainConfig
from quadrecon.encoding import FourierEncoder, HybridEncoder

logger = logging.getLogger(__name__)

NORMAL_EPS = 1e-8
UP = np.array([0.0, 0.0, 1.0])


@dataclass
class FieldOutputs:
    sigma: Tensor
    radiance: Optional[Tensor] = None
    normal: Optional[Tensor] = None
    degenerate: Optional[np.ndarray] = None
    basecolor: Optional[Tensor] = None
    metallic: Optional[Tensor] = None
    roughness: Optional[Tensor] = None

    @property
    def has_brdf(self) -> bool:
        return self.basecolor is not None


class FieldNetwork(Module):
    def __init__(self, config: TrainConfig, n_images: int, rng: np.random.Generator):
        self.encoder = HybridEncoder(config.grid, config.fourier, rng, use_fourier=config.hybrid_encoding)
        width = 64
        self.trunk = [Linear(self.encoder.output_dim, width, rng), Linear(width, width, rng), Linear(width, width, rng)]
        self.density_head = Linear(width, 1, rng, gain=1.0)
        self._dir_encoder = FourierEncoder(4)
        dir_dim = 3 + self._dir_encoder.output_dim
        self.radiance_hidden = Linear(width + dir_dim, 32, rng)
        self.radiance_out = Linear(32, 3, rng, gain=1.0)
        self.brdf_bottleneck = Linear(width, 16, rng, gain=1.0)
        self.brdf_decoder = [Linear(16, width, rng), Linear(width, width, rng)]
        self.basecolor_head = Linear(width + config.embedding_dim, 3, rng, gain=1.0)
        self.metallic_head = Linear(width, 1, rng, gain=1.0)
        self.roughness_head = Linear(width, 1, rng, gain=1.0)
        self.embeddings = Tensor(np.zeros((max(n_images, 1), config.embedding_dim)), requires_grad=True, name="embeddings")
        self.scene_radius = config.scene_radius
        self.alpha_grid: Optional[float] = None
        self.alpha_fourier: Optional[float] = None

    def set_annealing(self, alpha_grid: Optional[float], alpha_fourier: Optional[float]) -> None:
        self.alpha_grid = alpha_grid
        self.alpha_fourier = alpha_fourier

    def brdf_parameters(self) -> List[Tensor]:
        modules = [self.brdf_bottleneck, *self.brdf_decoder, self.basecolor_head, self.metallic_head, self.roughness_head]
        return [p for m in modules for p in m.parameters()] + [self.embeddings]

    def _trunk(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.encoder(x / self.scene_radius, self.alpha_grid, self.alpha_fourier)
        for layer in self.trunk:
            h = ops.relu(layer(h))
        raw = ops.reshape(self.density_head(h), (x.shape[0],))
        return h, ops.softplus(raw)

    def density_at(self, x) -> Tensor:
        """Density ``softplus(raw)`` at world positions (N, 3)."""
        return self._trunk(x if isinstance(x, Tensor) else Tensor(x))[1]

    def _radiance(self, h: Tensor, d: Tensor) -> Tensor:
        d = ops.normalize(d)
        d_enc = ops.concat([d, self._dir_encoder(d)], axis=-1)
        hidden = ops.relu(self.radiance_hidden(ops.concat([h, d_enc], axis=-1)))
        return ops.sigmoid(self.radiance_out(hidden))

    def _brdf(self, h: Tensor, image_index) -> Tuple[Tensor, Tensor, Tensor]:
        z = self.brdf_bottleneck(h)
        for layer in self.brdf_decoder:
            z = ops.relu(layer(z))
        n = h.shape[0]
        if image_index is None:
            emb = Tensor(np.broadcast_to(self.embeddings.data.mean(axis=0), (n, self.embeddings.shape[1])))
        else:
            idx = np.broadcast_to(np.asarray(image_index, dtype=np.int64), (n,))
            emb = self.embeddings[idx]
        basecolor = ops.sigmoid(self.basecolor_head(ops.concat([z, emb], axis=-1)))
        metallic = ops.sigmoid(self.metallic_head(z))
        roughness = ops.sigmoid(self.roughness_head(z))
        return basecolor, metallic, roughness

    def evaluate(
        self,
        x,
        d=None,
        image_index=None,
        normals: bool = False,
        brdf: bool = False,
    ) -> FieldOutputs:
        """Evaluate the requested heads at world positions ``x`` (N, 3).

        Outside any recording tape, normals are computed on a private tape.
        """
        with ExitStack() as stack:
            tape = active_tape()
            x = x if isinstance(x, Tensor) else Tensor(x)
            if normals:
                if tape is None:
                    tape = stack.enter_context(Tape())
                if not tape.tracks(x):
                    x = Tensor(x.data, requires_grad=True)
            h, sigma = self._trunk(x)
            out = FieldOutputs(sigma=sigma)
            if d is not None:
                out.radiance = self._radiance(h, d if isinstance(d, Tensor) else Tensor(d))
            if normals:
                out.normal, out.degenerate = self._normals(tape, sigma, x)
            if brdf:
                out.basecolor, out.metallic, out.roughness = self._brdf(h, image_index)
            return out

    def _normals(self, tape: Tape, sigma: Tensor, x: Tensor) -> Tuple[Tensor, np.ndarray]:
        (grad,) = tape.gradient(ops.sum_(sigma), [x], create_graph=True)
        return normals_from_gradient(grad)

    def normal_at(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Unit normals and the degenerate flag at world positions."""
        out = self.evaluate(x, normals=True)
        return out.normal.data, out.degenerate

    def radiance_at(self, x, d) -> Tensor:
        return self.evaluate(x, d=d).radiance

    def brdf_at(self, x, image_index=None) -> Tuple[Tensor, Tensor, Tensor]:
        out = self.evaluate(x, image_index=image_index, brdf=True)
        return out.basecolor, out.metallic, out.roughness


def normals_from_gradient(grad: Tensor) -> Tuple[Tensor, np.ndarray]:
    """``n = -g/|g|``; rows with ``|g| < 1e-8`` are flagged and set to +z."""
    length = ops.norm(grad, axis=-1, keepdims=True, eps=1e-30)
    degenerate = length.data[:, 0] < NORMAL_EPS
    normal = ops.neg(grad) / length
    if degenerate.any():
        fallback = np.broadcast_to(UP, normal.shape)
        normal = ops.where(np.broadcast_to(degenerate[:, None], normal.shape), fallback, normal)
    return normal, degenerate


def normals_of_density(sigma_fn, x) -> Tuple[np.ndarray, np.ndarray]:
    """Normals of an arbitrary density function ``sigma_fn(x (N, 3)) -> (N,)``."""
    with Tape() as tape:
        x = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
        sigma = sigma_fn(x)
        (grad,) = tape.gradient(ops.sum_(sigma), [x], create_graph=True)
        normal, degenerate = normals_from_gradient(grad)
    return normal.data, degenerate
