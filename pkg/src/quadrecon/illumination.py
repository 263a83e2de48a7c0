"""
Per-image illumination: an ambient term plus K spherical-Gaussian lobes.

A lobe ``(axis xi, sharpness lam, color mu)`` has radiance
``mu * exp(lam * (dot(w, xi) - 1))`` in direction ``w``. Learnable raw
parameters pass through softplus (colors, sharpness) and normalization
(axes), so colors stay non-negative and axes unit-length.
"""

import math
from dataclasses import dataclass

import numpy as np

from quadrecon.autodiff import Module, Tensor, ops
from quadrecon.config import IlluminationSpec, LobeSpec


def inverse_softplus(value) -> np.ndarray:
    value = np.maximum(np.asarray(value, dtype=np.float64), 1e-8)
    return value + np.log(-np.expm1(-value))


@dataclass
class SGLighting:
    ambient: Tensor  # (3,)
    axes: Tensor  # (K, 3)
    sharpness: Tensor  # (K,)
    colors: Tensor  # (K, 3)

    @property
    def lobes(self) -> int:
        return self.axes.shape[0]

    @classmethod
    def from_spec(cls, spec: IlluminationSpec) -> "SGLighting":
        k = len(spec.lobes)
        return cls(
            ambient=Tensor(np.asarray(spec.ambient, dtype=np.float64)),
            axes=Tensor(np.array([lobe.axis for lobe in spec.lobes]).reshape(k, 3)),
            sharpness=Tensor(np.array([lobe.sharpness for lobe in spec.lobes]).reshape(k)),
            colors=Tensor(np.array([lobe.color for lobe in spec.lobes]).reshape(k, 3)),
        )

    def to_spec(self) -> IlluminationSpec:
        return IlluminationSpec(
            ambient=tuple(float(v) for v in self.ambient.data),
            lobes=[
                LobeSpec(
                    axis=tuple(float(v) for v in self.axes.data[k]),
                    sharpness=float(self.sharpness.data[k]),
                    color=tuple(float(v) for v in self.colors.data[k]),
                )
                for k in range(self.lobes)
            ],
        )

    def radiance(self, directions) -> np.ndarray:
        """Incident radiance from unit ``directions`` (N, 3)."""
        w = np.asarray(directions, dtype=np.float64)
        expo = np.exp(self.sharpness.data[None, :] * (w @ self.axes.data.T - 1.0))
        return self.ambient.data[None, :] + expo @ self.colors.data

    def peak_radiance(self) -> np.ndarray:
        """Upper bound of the incident radiance over all directions."""
        return self.ambient.data + self.colors.data.sum(axis=0)


class Illumination(Module):
    """Learnable SG illumination of a single image."""

    def __init__(self, lobes: int = 3, rng: np.random.Generator = None, spec: IlluminationSpec = None):
        if spec is not None:
            lighting = SGLighting.from_spec(spec)
            self.raw_ambient = Tensor(inverse_softplus(lighting.ambient.data), requires_grad=True)
            self.raw_axes = Tensor(lighting.axes.data.copy(), requires_grad=True)
            self.raw_sharpness = Tensor(inverse_softplus(lighting.sharpness.data), requires_grad=True)
            self.raw_colors = Tensor(inverse_softplus(lighting.colors.data), requires_grad=True)
            return
        rng = rng or np.random.default_rng(0)
        axes = rng.normal(size=(lobes, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        self.raw_ambient = Tensor(inverse_softplus(np.full(3, 0.3)), requires_grad=True)
        self.raw_axes = Tensor(axes, requires_grad=True)
        self.raw_sharpness = Tensor(inverse_softplus(np.full(lobes, 4.0)), requires_grad=True)
        self.raw_colors = Tensor(inverse_softplus(np.full((lobes, 3), 0.5)), requires_grad=True)

    def lighting(self) -> SGLighting:
        return SGLighting(
            ambient=ops.softplus(self.raw_ambient),
            axes=ops.normalize(self.raw_axes),
            sharpness=ops.softplus(self.raw_sharpness),
            colors=ops.softplus(self.raw_colors),
        )

    def load_spec(self, spec: IlluminationSpec) -> None:
        fresh = Illumination(spec=spec)
        for name, p in fresh.named_parameters():
            target = getattr(self, name)
            if target.shape != p.shape:
                raise ValueError(f"illumination {name} shape {p.shape} does not match {target.shape}")
            target.data[...] = p.data


# cosine lobe max(dot(n, w), 0) approximated by an SG with unit-integral scaling of pi
COSINE_SHARPNESS = 2.133
COSINE_AMPLITUDE = COSINE_SHARPNESS / (2.0 * (1.0 - math.exp(-2.0 * COSINE_SHARPNESS)))


def sg_inner_product(axis1: Tensor, lam1, mu1, axis2: Tensor, lam2, mu2) -> Tensor:
    """Integral over the sphere of the product of two SGs."""
    lam_m = ops.norm(axis1 * lam1 + axis2 * lam2, axis=-1, keepdims=True, eps=1e-12)
    scale = ops.exp(lam_m - lam1 - lam2) * (1.0 - ops.exp(lam_m * -2.0)) / lam_m
    return scale * mu1 * mu2 * (2.0 * math.pi)


def sg_irradiance(lighting: SGLighting, k: int, normal: Tensor) -> Tensor:
    """Cosine-weighted irradiance of lobe ``k`` on surfaces with unit ``normal`` (N, 3)."""
    axis = ops.reshape(lighting.axes[k], (1, 3))
    lam = lighting.sharpness[k]
    mu = ops.reshape(lighting.colors[k], (1, 3))
    return sg_inner_product(axis, lam, mu, normal, COSINE_SHARPNESS, COSINE_AMPLITUDE)
