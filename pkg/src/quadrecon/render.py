"""
Volume rendering by quadrature and Cook-Torrance shading under SG lighting.

Samples are stratified per ray: bin ``i`` spans ``[t_near + i*delta, t_near + (i+1)*delta)``
and its sample sits at a jittered position inside the bin, so the opacity of a
homogeneous medium is exact for any sample count.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from quadrecon.autodiff import Tensor, no_record, ops
from quadrecon.cameras import CameraPose, Rays, generate_rays, patch_pixels
from quadrecon.field import FieldNetwork
from quadrecon.illumination import SGLighting, sg_irradiance

logger = logging.getLogger(__name__)

SCENE_RADIUS = 1.5
DEPTH_EPS = 1e-8
F0_DIELECTRIC = 0.04


@dataclass
class RayMarchResult:
    color: Tensor  # (R, 3)
    alpha: Tensor  # (R,)
    depth: Tensor  # (R,)
    weights: Tensor  # (R, S)
    t: np.ndarray  # (R, S)
    radiance: Optional[Tensor] = None  # composited radiance head
    shaded: Optional[Tensor] = None  # composited shaded color
    normal: Optional[Tensor] = None  # composited normal
    basecolor: Optional[Tensor] = None
    metallic: Optional[Tensor] = None
    roughness: Optional[Tensor] = None
    sample_normals: Optional[Tensor] = None  # (R, S, 3)
    directions: Optional[Tensor] = None  # (R, 3)


def sphere_bounds(origins: np.ndarray, directions: np.ndarray, radius: float = SCENE_RADIUS) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``t_near``, ``t_far`` and a hit mask for unit-direction rays against the scene sphere."""
    b = np.sum(origins * directions, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = np.maximum(-b + root, 0.0)
    hit &= far > near
    return np.where(hit, near, 0.0), np.where(hit, far, 1.0), hit


def stratified_samples(
    near: np.ndarray,
    far: np.ndarray,
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample distances (R, S) and bin widths (R, S); midpoints without ``rng``."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    delta = ((far - near) / n_samples)[:, None]
    u = np.full((near.shape[0], n_samples), 0.5) if rng is None else rng.uniform(size=(near.shape[0], n_samples))
    t = near[:, None] + (np.arange(n_samples)[None, :] + u) * delta
    return t, np.broadcast_to(delta, t.shape).copy()


def composite_weights(sigma: Tensor, delta: np.ndarray) -> Tensor:
    """``w_i = T_i (1 - exp(-sigma_i delta_i))`` with exclusive transmittance."""
    tau = sigma * delta
    accumulated = ops.cumsum(tau, axis=-1) - tau
    return ops.exp(ops.neg(accumulated)) * (1.0 - ops.exp(ops.neg(tau)))


def _composite(weights: Tensor, values: Tensor) -> Tensor:
    return ops.sum_(ops.reshape(weights, weights.shape + (1,)) * values, axis=1)


def march_ray(
    rays: Rays,
    sampler: Callable[[Tensor, Tensor], Tuple[Tensor, Tensor]],
    t_near,
    t_far,
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> RayMarchResult:
    """Quadrature of ``int T(t) sigma(t) c(t) dt`` for a batch of rays.

    ``sampler(points (R*S, 3), dirs (R*S, 3))`` returns densities (R*S,) and colors (R*S, 3).
    """
    n_rays = len(rays)
    near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_rays,))
    if (far <= near).any():
        raise ValueError("t_near must be smaller than t_far")
    t, delta = stratified_samples(near, far, n_samples, rng)
    points, dirs = _sample_points(rays, t)
    sigma, color = sampler(points, dirs)
    weights = composite_weights(ops.reshape(sigma, (n_rays, n_samples)), delta)
    return _finish(weights, t, ops.reshape(color, (n_rays, n_samples, 3)))


def _sample_points(rays: Rays, t: np.ndarray) -> Tuple[Tensor, Tensor]:
    n_rays, n_samples = t.shape
    o = ops.reshape(rays.origins, (n_rays, 1, 3))
    d = ops.reshape(rays.directions, (n_rays, 1, 3))
    points = o + d * t[:, :, None]
    dirs = ops.broadcast_to(d, (n_rays, n_samples, 3))
    return ops.reshape(points, (n_rays * n_samples, 3)), ops.reshape(dirs, (n_rays * n_samples, 3))


def _finish(weights: Tensor, t: np.ndarray, color: Tensor) -> RayMarchResult:
    alpha = ops.sum_(weights, axis=-1)
    depth = ops.sum_(weights * t, axis=-1) / np.maximum(alpha.data, DEPTH_EPS)
    return RayMarchResult(color=_composite(weights, color), alpha=alpha, depth=depth, weights=weights, t=t)


# ---------------------------------------------------------------- shading


def _fresnel(f0: Tensor, cos: Tensor) -> Tensor:
    return f0 + (1.0 - f0) * ops.power(1.0 - cos, 5.0)


def shade(
    basecolor,
    metallic,
    roughness,
    normal,
    view,
    lighting: SGLighting,
    degenerate: Optional[np.ndarray] = None,
    energy_cap: bool = False,
) -> Tensor:
    """Cook-Torrance (GGX, Smith/Schlick-GGX, Schlick Fresnel) under SG lighting.

    ``rgb = ambient * (1 - metallic) * basecolor + sum over lobes of
    (diffuse / pi + specular) * irradiance``. ``view`` points from the surface
    towards the viewer. With ``energy_cap`` the specular term of a lobe is
    capped at the Fresnel-weighted lobe color. Degenerate normals shade
    diffuse-only with ``n = view``.
    """
    b = basecolor if isinstance(basecolor, Tensor) else Tensor(basecolor)
    m = metallic if isinstance(metallic, Tensor) else Tensor(metallic)
    r = roughness if isinstance(roughness, Tensor) else Tensor(roughness)
    n = normal if isinstance(normal, Tensor) else Tensor(normal)
    v = view if isinstance(view, Tensor) else Tensor(view)
    rows = n.shape[0]
    specular_on = np.ones((rows, 1))
    if degenerate is not None and np.any(degenerate):
        mask = np.broadcast_to(np.asarray(degenerate)[:, None], n.shape)
        n = ops.where(mask, v, n)
        specular_on = (~np.asarray(degenerate))[:, None].astype(np.float64)

    f0 = (1.0 - m) * F0_DIELECTRIC + m * b
    diffuse_albedo = (1.0 - m) * b
    color = diffuse_albedo * lighting.ambient

    nv = ops.maximum(ops.dot(n, v, keepdims=True), 1e-4)
    alpha2 = ops.power(r * r, 2.0)
    k = r * r * 0.5
    g_v = nv / (nv * (1.0 - k) + k)
    for lobe in range(lighting.lobes):
        xi = ops.reshape(lighting.axes[lobe], (1, 3))
        irradiance = sg_irradiance(lighting, lobe, n)
        color = color + diffuse_albedo * irradiance / math.pi

        nl_raw = ops.dot(n, xi, keepdims=True)
        facing = (nl_raw.data > 0).astype(np.float64) * specular_on
        if not facing.any():
            continue
        h = ops.normalize(v + xi, eps=1e-12)
        vh = ops.maximum(ops.dot(v, h, keepdims=True), 0.0)
        fresnel = _fresnel(f0, vh)
        nl = ops.maximum(nl_raw, 1e-4)
        nh = ops.maximum(ops.dot(n, h, keepdims=True), 0.0)
        denom = nh * nh * (alpha2 - 1.0) + 1.0
        ndf = alpha2 / (denom * denom * math.pi)
        g_l = nl / (nl * (1.0 - k) + k)
        specular = ndf * g_v * g_l * fresnel / (nl * nv * 4.0) * irradiance
        if energy_cap:
            mu = ops.reshape(lighting.colors[lobe], (1, 3))
            specular = ops.minimum(specular, fresnel * mu)
        color = color + specular * facing
    return color


# ---------------------------------------------------------------- field rendering


def render_rays(
    field: FieldNetwork,
    rays: Rays,
    lighting: Optional[SGLighting],
    image_index: Optional[int],
    lambda_b: float,
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
    need_brdf: Optional[bool] = None,
    material: Optional[dict] = None,
    energy_cap: bool = False,
) -> RayMarchResult:
    """March rays through the field and blend radiance and shaded color per pixel.

    ``out = lambda_b * radiance + (1 - lambda_b) * shaded``. Shading (and the
    normal path) is skipped while ``lambda_b == 1`` unless ``need_brdf`` is set.
    ``material`` overrides basecolor/metallic/roughness with constants.
    ``energy_cap`` is passed on to :func:`shade`.
    """
    n_rays = len(rays)
    near, far, hit = sphere_bounds(rays.origins.data, rays.directions.data, field.scene_radius)
    t, delta = stratified_samples(near, far, n_samples, rng)
    points, dirs = _sample_points(rays, t)
    shading = lighting is not None and (lambda_b < 1.0 if need_brdf is None else need_brdf)
    out = field.evaluate(points, d=dirs, image_index=image_index, normals=shading, brdf=shading)
    sigma = ops.reshape(out.sigma, (n_rays, n_samples)) * hit[:, None].astype(np.float64)
    weights = composite_weights(sigma, delta)
    radiance = ops.reshape(out.radiance, (n_rays, n_samples, 3))
    result = _finish(weights, t, radiance)
    result.radiance = result.color
    result.directions = rays.directions
    if not shading:
        return result

    basecolor, metallic, roughness = out.basecolor, out.metallic, out.roughness
    if material:
        count = basecolor.shape[0]
        if material.get("basecolor") is not None:
            basecolor = Tensor(np.broadcast_to(np.asarray(material["basecolor"], dtype=np.float64), (count, 3)))
        if material.get("metallic") is not None:
            metallic = Tensor(np.full((count, 1), float(material["metallic"])))
        if material.get("roughness") is not None:
            roughness = Tensor(np.full((count, 1), float(material["roughness"])))
    shaded = shade(basecolor, metallic, roughness, out.normal, ops.neg(dirs), lighting, out.degenerate, energy_cap)
    result.shaded = _composite(weights, ops.reshape(shaded, (n_rays, n_samples, 3)))
    result.normal = _composite(weights, ops.reshape(out.normal, (n_rays, n_samples, 3)))
    result.basecolor = _composite(weights, ops.reshape(basecolor, (n_rays, n_samples, 3)))
    result.metallic = _composite(weights, ops.reshape(metallic, (n_rays, n_samples, 1)))
    result.roughness = _composite(weights, ops.reshape(roughness, (n_rays, n_samples, 1)))
    result.sample_normals = ops.reshape(out.normal, (n_rays, n_samples, 3))
    result.color = result.radiance * lambda_b + result.shaded * (1.0 - lambda_b) if lambda_b > 0 else result.shaded
    return result


def render_patch(
    pose: CameraPose,
    rect: Tuple[int, int, int],
    field: FieldNetwork,
    lighting: Optional[SGLighting],
    image_index: Optional[int],
    lambda_b: float,
    size: Optional[Tuple[int, int]] = None,
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
    energy_cap: bool = False,
) -> dict:
    """Render the square patch ``(x0, y0, side)``; returns rgb/alpha/depth patches."""
    x0, y0, side = rect
    rays = generate_rays(pose, patch_pixels(x0, y0, side), size=size)
    result = render_rays(field, rays, lighting, image_index, lambda_b, n_samples, rng, energy_cap=energy_cap)
    return {
        "rgb": ops.reshape(result.color, (side, side, 3)),
        "alpha": ops.reshape(result.alpha, (side, side)),
        "depth": ops.reshape(result.depth, (side, side)),
        "result": result,
    }


def render_image(
    field: FieldNetwork,
    pose: CameraPose,
    lighting: Optional[SGLighting],
    image_index: Optional[int],
    size: Tuple[int, int],
    lambda_b: float = 0.0,
    n_samples: int = 64,
    chunk: int = 1024,
    material: Optional[dict] = None,
    energy_cap: bool = False,
) -> dict:
    """Full-frame render without recording gradients; arrays of shape (h, w, ...)."""
    w, h = size
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pixels = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1)
    rgb = np.zeros((w * h, 3))
    alpha = np.zeros(w * h)
    depth = np.zeros(w * h)
    with no_record():
        for start in range(0, w * h, chunk):
            rays = generate_rays(pose, pixels[start:start + chunk], size=size)
            res = render_rays(
                field, rays, lighting, image_index, lambda_b, n_samples, material=material, energy_cap=energy_cap
            )
            rgb[start:start + chunk] = res.color.data
            alpha[start:start + chunk] = res.alpha.data
            depth[start:start + chunk] = res.depth.data
    return {"rgb": rgb.reshape(h, w, 3), "alpha": alpha.reshape(h, w), "depth": depth.reshape(h, w)}
