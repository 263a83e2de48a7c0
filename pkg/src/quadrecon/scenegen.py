"""
Synthetic ground truth: analytic scenes rendered with exact ray intersections.

Surface points are shaded with :func:`quadrecon.render.shade`, the same
Cook-Torrance model the learned field is rendered with, so every generated
pixel is representable by the reconstruction.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from quadrecon.autodiff import Tensor, no_record
from quadrecon.cameras import (
    CameraPose,
    QuadrantLabel,
    focal_from_fov,
    generate_rays,
    write_pose_blocks,
    write_quadrants,
)
from quadrecon.config import IlluminationSpec, LobeSpec, ManifestRecord, PrimitiveSpec, SceneSpec
from quadrecon.dataset import GT_POSES, ILLUMINATION_DIR, INIT_POSES, MANIFEST, QUADRANTS
from quadrecon.errors import SceneSpecError
from quadrecon.illumination import SGLighting
from quadrecon.imageio import write_image, write_mask
from quadrecon.render import shade

logger = logging.getLogger(__name__)

MIN_COVERAGE = 0.05
MAX_COVERAGE = 0.95
MAX_CAMERA_TRIES = 50
TORUS_STEPS = 160


@dataclass
class SurfaceHit:
    """Nearest intersection per ray; ``t`` is inf where nothing is hit."""

    t: np.ndarray
    normal: np.ndarray
    primitive: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.t)


def _intersect_sphere(o, d, center, radius) -> Tuple[np.ndarray, np.ndarray]:
    oc = o - center
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - root, -b + root
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where((disc > 0) & (t > 1e-9), t, np.inf)
    p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
    return t, (p - center) / radius


def _intersect_box(o, d, center, half) -> Tuple[np.ndarray, np.ndarray]:
    half = np.asarray(half)
    safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
    lo = (center - half - o) / safe
    hi = (center + half - o) / safe
    t_min = np.minimum(lo, hi)
    t_max = np.maximum(lo, hi)
    t_enter = t_min.max(axis=-1)
    t_exit = t_max.min(axis=-1)
    hit = (t_exit >= t_enter) & (t_exit > 1e-9)
    t = np.where(hit, np.where(t_enter > 1e-9, t_enter, t_exit), np.inf)
    axis = np.argmax(t_min, axis=-1)
    normal = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    normal[rows, axis] = -np.sign(safe[rows, axis])
    return t, normal


def _torus_sdf(p, major, minor) -> np.ndarray:
    ring = np.linalg.norm(p[:, [0, 2]], axis=-1) - major
    return np.sqrt(ring * ring + p[:, 1] ** 2) - minor


def _intersect_torus(o, d, center, major, minor) -> Tuple[np.ndarray, np.ndarray]:
    """Sphere tracing of the torus (axis +y) distance function."""
    t_bound, _ = _intersect_sphere(o, d, center, major + minor)
    active = np.isfinite(t_bound)
    t = np.where(active, t_bound, 0.0)
    hit = np.zeros(o.shape[0], dtype=bool)
    for _ in range(TORUS_STEPS):
        p = o + d * t[:, None] - center
        dist = _torus_sdf(p, major, minor)
        hit |= active & (dist < 1e-7)
        active &= ~hit & (np.linalg.norm(p, axis=-1) <= major + minor + 1e-6)
        t = np.where(active, t + dist, t)
    p = o + d * t[:, None] - center
    radial = np.linalg.norm(p[:, [0, 2]], axis=-1, keepdims=True)
    ring = np.concatenate([p[:, :1], np.zeros_like(radial), p[:, 2:]], axis=-1) * (major / np.maximum(radial, 1e-12))
    normal = p - ring
    normal /= np.maximum(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-12)
    return np.where(hit, t, np.inf), normal


def intersect_scene(spec: SceneSpec, origins: np.ndarray, directions: np.ndarray) -> SurfaceHit:
    n = origins.shape[0]
    best = SurfaceHit(t=np.full(n, np.inf), normal=np.zeros((n, 3)), primitive=np.full(n, -1))
    for index, primitive in enumerate(spec.primitives):
        center = np.asarray(primitive.center)
        if primitive.kind == "sphere":
            t, normal = _intersect_sphere(origins, directions, center, primitive.size[0])
        elif primitive.kind == "box":
            t, normal = _intersect_box(origins, directions, center, primitive.size)
        else:
            t, normal = _intersect_torus(origins, directions, center, *primitive.size)
        closer = t < best.t
        best.t = np.where(closer, t, best.t)
        best.normal = np.where(closer[:, None], normal, best.normal)
        best.primitive = np.where(closer, index, best.primitive)
    return best


def texture(primitive: PrimitiveSpec, points: np.ndarray) -> np.ndarray:
    """Procedural basecolor at world ``points`` (N, 3)."""
    local = (points - np.asarray(primitive.center)) * primitive.texture_scale
    a, b = np.asarray(primitive.color_a), np.asarray(primitive.color_b)
    if primitive.texture == "solid":
        return np.broadcast_to(a, points.shape).copy()
    if primitive.texture == "checker":
        parity = np.floor(local).sum(axis=-1) % 2
        return np.where(parity[:, None] > 0.5, b, a)
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    v = 0.5 + 0.25 * (np.sin(x + 1.3 * np.cos(y)) + np.sin(z + 1.7 * np.cos(x)))
    return a + (b - a) * v[:, None]


def material(primitive: PrimitiveSpec, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    basecolor = texture(primitive, points)
    metallic = np.full(points.shape[0], primitive.metallic)
    if primitive.metallic_split:
        metallic = np.where(points[:, 0] > primitive.center[0], primitive.metallic, 0.0)
    roughness = np.full(points.shape[0], primitive.roughness)
    return basecolor, metallic, roughness


@dataclass
class OracleRender:
    image: np.ndarray  # linear, object only, (h, w, 3)
    mask: np.ndarray  # (h, w)
    hit: SurfaceHit


def render_oracle(spec: SceneSpec, pose: CameraPose, illumination: IlluminationSpec) -> OracleRender:
    """Shade the analytic scene as seen by ``pose``; background pixels are black."""
    w, h = pose.width, pose.height
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pixels = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1)
    with no_record():
        rays = generate_rays(pose, pixels)
    origins, directions = rays.origins.data, rays.directions.data
    hit = intersect_scene(spec, origins, directions)
    mask = hit.mask
    color = np.zeros((w * h, 3))
    if mask.any():
        points = origins[mask] + directions[mask] * hit.t[mask][:, None]
        basecolor = np.zeros((points.shape[0], 3))
        metallic = np.zeros(points.shape[0])
        roughness = np.zeros(points.shape[0])
        owners = hit.primitive[mask]
        for index, primitive in enumerate(spec.primitives):
            sel = owners == index
            if sel.any():
                basecolor[sel], metallic[sel], roughness[sel] = material(primitive, points[sel])
        with no_record():
            shaded = shade(
                Tensor(basecolor),
                Tensor(metallic[:, None]),
                Tensor(roughness[:, None]),
                Tensor(hit.normal[mask]),
                Tensor(-directions[mask]),
                SGLighting.from_spec(illumination),
            )
        color[mask] = shaded.data
    return OracleRender(image=color.reshape(h, w, 3), mask=mask.reshape(h, w).astype(np.float64), hit=hit)


def _sample_eye(rng: np.random.Generator, label: QuadrantLabel, radius: float) -> np.ndarray:
    """Random direction inside the octant, kept away from its boundary planes."""
    direction = np.abs(rng.normal(size=3)) + 0.25
    direction *= label.signs()
    return radius * direction / np.linalg.norm(direction)


def _sample_light(rng: np.random.Generator, spec: SceneSpec, eye: np.ndarray) -> IlluminationSpec:
    toward_camera = eye / np.linalg.norm(eye)
    axis = toward_camera if spec.light_at_camera else toward_camera + rng.normal(size=3) * 0.6
    tint = rng.uniform(0.8, 1.2, size=3)
    return IlluminationSpec(
        ambient=tuple(float(v) for v in spec.ambient * rng.uniform(0.8, 1.2, size=3)),
        lobes=[
            LobeSpec(
                axis=tuple(float(v) for v in axis),
                sharpness=spec.light_sharpness,
                color=tuple(float(v) for v in spec.light_intensity * tint),
            )
        ],
    )


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * k @ k


def perturb_pose(matrix: np.ndarray, rotation_deg: float, translation: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate by exactly ``rotation_deg`` about a random axis and move the eye by ``translation``."""
    rot = _rotation(rng.normal(size=3), math.radians(rotation_deg))
    offset = rng.normal(size=3)
    offset *= translation / np.linalg.norm(offset)
    return np.concatenate([rot @ matrix[:, :3], (matrix[:, 3] + offset)[:, None]], axis=1)


@dataclass
class GeneratedScene:
    root: Path
    names: List[str]
    poses: Dict[str, np.ndarray]
    illumination: Dict[str, IlluminationSpec]
    coverage: Dict[str, float] = field(default_factory=dict)


def generate_scene(
    spec: SceneSpec,
    n_views: int,
    seed: Optional[int],
    out_dir: Path,
) -> GeneratedScene:
    """Render ``n_views`` views with ground-truth poses, masks and per-view lights to ``out_dir``."""
    if n_views < 4:
        raise SceneSpecError(f"a scene needs at least 4 views, got {n_views}", {"views": n_views})
    spec.validate_bounds()
    out = Path(out_dir)
    for sub in ("images", "masks", ILLUMINATION_DIR):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    focal = focal_from_fov(spec.fov_deg)

    records, labels, poses, perturbed, lights, coverage = [], {}, {}, {}, {}, {}
    for i in range(n_views):
        name = f"view_{i:03d}"
        label = QuadrantLabel(right=bool(i & 1), above=bool(i & 2), front=bool(i & 4))
        for _ in range(MAX_CAMERA_TRIES):
            radius = spec.camera_radius * (1.0 + spec.camera_radius_jitter * rng.uniform(-1.0, 1.0))
            pose = CameraPose(_sample_eye(rng, label, radius), spec.width, spec.height, focal)
            illumination = _sample_light(rng, spec, pose.eye0)
            oracle = render_oracle(spec, pose, illumination)
            fraction = float(oracle.mask.mean())
            if MIN_COVERAGE <= fraction <= MAX_COVERAGE:
                break
        else:
            raise SceneSpecError(
                f"no camera for {name} sees the object with 5-95% coverage",
                {"view": name, "coverage": fraction},
            )
        background = rng.uniform(0.0, 1.0, size=3)
        image = np.where(oracle.mask[:, :, None] > 0, oracle.image, background)
        write_image(out / "images" / f"{name}.png", image)
        write_mask(out / "masks" / f"{name}.png", oracle.mask)
        illumination.write(out / ILLUMINATION_DIR / f"{name}.json")

        labels[name] = QuadrantLabel.from_eye(pose.eye0)
        poses[name] = pose.matrix()
        perturbed[name] = perturb_pose(poses[name], spec.perturb_rotation_deg, spec.perturb_translation, rng)
        lights[name] = illumination
        coverage[name] = fraction
        records.append(
            ManifestRecord(
                image=f"images/{name}.png",
                mask=f"masks/{name}.png",
                width=spec.width,
                height=spec.height,
                pose_ref=name,
                quadrant=str(labels[name]),
            )
        )
        logger.debug(f"Rendered {name}: quadrant {labels[name]}, coverage {fraction:.2f}")

    (out / MANIFEST).write_text(
        "# image mask width height pose_ref quadrant\n" + "".join(r.to_line() + "\n" for r in records)
    )
    write_quadrants(out / QUADRANTS, labels)
    write_pose_blocks(out / GT_POSES, poses)
    write_pose_blocks(out / INIT_POSES, perturbed)
    (out / "scene.json").write_text(spec.model_dump_json(indent=2))
    logger.info(f"Generated {n_views} views in {out}")
    return GeneratedScene(root=out, names=list(poses), poses=poses, illumination=lights, coverage=coverage)
