"""
Image metrics, pose errors and mesh extraction.

PSNR and SSIM compare linear images in [0, 1]. Pose errors come from a
Procrustes alignment of recovered and ground-truth cameras. Meshes are
extracted with marching cubes on sampled density and carry per-vertex
normals and BRDF attributes queried from the field.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from rich.console import Console
from rich.table import Table
from skimage.measure import marching_cubes
from skimage.metrics import structural_similarity

from quadrecon.autodiff import no_record
from quadrecon.cameras import ProcrustesResult, procrustes_align
from quadrecon.errors import MetricsError, NoSurfaceError
from quadrecon.field import FieldNetwork
from quadrecon.render import render_image
from quadrecon.trainer.schedule import schedule_at

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MIN_MESH_RESOLUTION = 16
DEGENERATE_AREA = 1e-14
ATTRIBUTE_CHUNK = 4096

DensityFn = Callable[[np.ndarray], np.ndarray]


def _pair(a, b) -> tuple:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"image shapes differ: {a.shape} vs {b.shape}", {"shapes": [a.shape, b.shape]})
    return a, b


def psnr(a, b) -> float:
    """``-10 log10(MSE)`` for images in [0, 1], capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def ssim(a, b) -> float:
    """Mean local SSIM, Gaussian window (11, sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise MetricsError(f"expected a 2-D or 3-D image, got shape {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise MetricsError(
            f"image {a.shape[1]}x{a.shape[0]} is smaller than the {SSIM_WINDOW}px SSIM window", {"shape": a.shape}
        )
    return float(
        structural_similarity(
            a,
            b,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=1.0,
            channel_axis=-1 if a.ndim == 3 else None,
        )
    )


# ---------------------------------------------------------------- meshes


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int
    normals: np.ndarray  # (V, 3)
    basecolor: Optional[np.ndarray] = None  # (V, 3)
    metallic: Optional[np.ndarray] = None  # (V,)
    roughness: Optional[np.ndarray] = None  # (V,)

    @property
    def has_brdf(self) -> bool:
        return self.basecolor is not None

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2)."""
        tri = self.triangles
        pairs = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edges()) + len(self.triangles))

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        tri = self.triangles
        pairs = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
        _, counts = np.unique(pairs, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def write_ply(self, path: Path) -> None:
        """ASCII PLY. Vertex properties in order: x y z nx ny nz, then
        red green blue metallic roughness when BRDF attributes are present."""
        path = Path(path)
        props = ["x", "y", "z", "nx", "ny", "nz"]
        columns = [self.vertices, self.normals]
        if self.has_brdf:
            props += ["red", "green", "blue", "metallic", "roughness"]
            columns += [self.basecolor, self.metallic[:, None], self.roughness[:, None]]
        table = np.concatenate(columns, axis=1)
        lines = [
            "ply",
            "format ascii 1.0",
            "comment quadrecon mesh, basecolor linear in [0,1]",
            f"element vertex {len(self.vertices)}",
            *(f"property float {p}" for p in props),
            f"element face {len(self.triangles)}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
        lines += [" ".join(f"{v:.7g}" for v in row) for row in table]
        lines += [f"3 {a} {b} {c}" for a, b, c in self.triangles]
        path.write_text("\n".join(lines) + "\n")
        logger.info(f"Wrote mesh with {len(self.vertices)} vertices and {len(self.triangles)} faces to {path}")


def read_ply(path: Path) -> TriangleMesh:
    """Read back an ASCII PLY written by :meth:`TriangleMesh.write_ply`."""
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    header = lines[:end]
    n_vertices = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    n_faces = int(next(l for l in header if l.startswith("element face")).split()[-1])
    props = [l.split()[-1] for l in header if l.startswith("property float")]
    table = np.array([[float(v) for v in l.split()] for l in lines[end + 1:end + 1 + n_vertices]]).reshape(n_vertices, len(props))
    faces = np.array(
        [[int(v) for v in l.split()[1:4]] for l in lines[end + 1 + n_vertices:end + 1 + n_vertices + n_faces]], dtype=np.int64
    ).reshape(n_faces, 3)
    mesh = TriangleMesh(table[:, 0:3], faces, table[:, 3:6])
    if "roughness" in props:
        mesh.basecolor, mesh.metallic, mesh.roughness = table[:, 6:9], table[:, 9], table[:, 10]
    return mesh


def _drop_degenerate(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    repeated = (triangles[:, 0] == triangles[:, 1]) | (triangles[:, 1] == triangles[:, 2]) | (triangles[:, 0] == triangles[:, 2])
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    keep = ~repeated & (area > DEGENERATE_AREA)
    if not keep.all():
        logger.debug(f"Dropped {int((~keep).sum())} degenerate triangles")
    return triangles[keep]


def _compact(vertices: np.ndarray, triangles: np.ndarray):
    used, inverse = np.unique(triangles, return_inverse=True)
    return vertices[used], inverse.reshape(triangles.shape).astype(np.int64)


def sample_density(density: DensityFn, resolution: int, bound: float = 1.0, chunk: int = 32768) -> np.ndarray:
    """Density on a ``resolution^3`` lattice over ``[-bound, bound]^3``, indexed ``[x, y, z]``."""
    axis = np.linspace(-bound, bound, resolution)
    points = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.empty(len(points))
    for start in range(0, len(points), chunk):
        values[start:start + chunk] = density(points[start:start + chunk])
    return values.reshape(resolution, resolution, resolution)


def _field_density(field_net: FieldNetwork) -> DensityFn:
    def density(points: np.ndarray) -> np.ndarray:
        with no_record():
            return field_net.density_at(points).data

    return density


def extract_mesh(
    source: Union[FieldNetwork, DensityFn],
    resolution: int = 128,
    threshold: float = 10.0,
    bound: float = 1.0,
    image_index: Optional[int] = None,
) -> TriangleMesh:
    """Marching cubes on sampled density, with normals and BRDF at the vertices.

    ``source`` is a trained field or a plain density function
    ``(N, 3) -> (N,)``; plain functions get normals from their own gradient
    and no BRDF attributes.
    """
    if resolution < MIN_MESH_RESOLUTION:
        raise ValueError(f"mesh resolution must be at least {MIN_MESH_RESOLUTION}, got {resolution}")
    is_field = isinstance(source, FieldNetwork)
    density = _field_density(source) if is_field else source
    volume = sample_density(density, resolution, bound)
    if not (volume.min() < threshold < volume.max()):
        raise NoSurfaceError(
            f"no surface at density {threshold} (sampled range {volume.min():.4g}..{volume.max():.4g})",
            {"threshold": threshold, "min": float(volume.min()), "max": float(volume.max())},
        )
    spacing = 2.0 * bound / (resolution - 1)
    vertices, triangles, _, _ = marching_cubes(volume, level=threshold, spacing=(spacing,) * 3, gradient_direction="descent")
    vertices = vertices.astype(np.float64) - bound
    triangles = _drop_degenerate(vertices, triangles.astype(np.int64))
    if len(triangles) == 0:
        raise NoSurfaceError(f"level set at density {threshold} has no usable triangles", {"threshold": threshold})
    vertices, triangles = _compact(vertices, triangles)

    if not is_field:
        normals = _finite_difference_normals(source, vertices, spacing * 0.5)
        return TriangleMesh(vertices, triangles, normals)

    n = len(vertices)
    mesh = TriangleMesh(vertices, triangles, np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros(n))
    for start in range(0, len(vertices), ATTRIBUTE_CHUNK):
        part = slice(start, start + ATTRIBUTE_CHUNK)
        mesh.normals[part] = source.normal_at(vertices[part])[0]
        with no_record():
            basecolor, metallic, roughness = source.brdf_at(vertices[part], image_index)
        mesh.basecolor[part] = basecolor.data
        mesh.metallic[part] = metallic.data[:, 0]
        mesh.roughness[part] = roughness.data[:, 0]
    logger.info(f"Extracted mesh: {len(vertices)} vertices, {len(triangles)} triangles at resolution {resolution}")
    return mesh


def _finite_difference_normals(density: DensityFn, points: np.ndarray, h: float) -> np.ndarray:
    """Central-difference `-grad / |grad|` of a plain density function."""
    grad = np.zeros_like(points)
    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        grad[:, k] = (density(points + step) - density(points - step)) / (2.0 * h)
    length = np.linalg.norm(grad, axis=1, keepdims=True)
    return np.where(length > 1e-12, -grad / np.maximum(length, 1e-12), np.array([0.0, 0.0, 1.0]))


# ---------------------------------------------------------------- reports


@dataclass
class ViewMetrics:
    name: str
    psnr: float
    ssim: float


@dataclass
class EvaluationReport:
    views: List[ViewMetrics] = field(default_factory=list)
    poses: Optional[ProcrustesResult] = None
    initial_poses: Optional[ProcrustesResult] = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([v.psnr for v in self.views])) if self.views else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([v.ssim for v in self.views])) if self.views else float("nan")

    def summary(self) -> Dict[str, float]:
        summary = {"psnr": self.mean_psnr, "ssim": self.mean_ssim}
        for label, result in (("", self.poses), ("init_", self.initial_poses)):
            if result is not None:
                summary[f"{label}rotation_deg_mean"] = result.rotation_error_mean
                summary[f"{label}rotation_deg_std"] = result.rotation_error_std
                summary[f"{label}translation_mean"] = result.translation_error_mean
                summary[f"{label}translation_std"] = result.translation_error_std
        return summary

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["view", "psnr", "ssim"])
            for v in self.views:
                writer.writerow([v.name, f"{v.psnr:.6f}", f"{v.ssim:.6f}"])
            for key, value in self.summary().items():
                writer.writerow([f"mean:{key}", f"{value:.6f}", ""])

    def table(self) -> Table:
        table = Table(title="Evaluation")
        table.add_column("view")
        table.add_column("PSNR [dB]", justify="right")
        table.add_column("SSIM", justify="right")
        for v in self.views:
            table.add_row(v.name, f"{v.psnr:.2f}", f"{v.ssim:.4f}")
        table.add_row("mean", f"{self.mean_psnr:.2f}", f"{self.mean_ssim:.4f}", style="bold")
        for label, result in (("poses", self.poses), ("initial poses", self.initial_poses)):
            if result is not None:
                table.add_row(
                    label,
                    f"rot {result.rotation_error_mean:.2f}±{result.rotation_error_std:.2f}°",
                    f"trans {result.translation_error_mean:.3f}±{result.translation_error_std:.3f}",
                )
        return table

    def print(self, console: Optional[Console] = None) -> None:
        (console or Console()).print(self.table())


def pose_errors(estimated: Dict[str, np.ndarray], reference: Dict[str, Optional[np.ndarray]]) -> Optional[ProcrustesResult]:
    """Procrustes pose errors over views present in both sets; None below 3 views."""
    names = [n for n in estimated if reference.get(n) is not None]
    if len(names) < 3:
        return None
    return procrustes_align([estimated[n] for n in names], [reference[n] for n in names])


def evaluate(trainer, views: Optional[Sequence[int]] = None, n_samples: Optional[int] = None) -> EvaluationReport:
    """Render ``views`` (held-out views, or every view without a split) and score them.

    Pose errors cover every view with a ground-truth pose.
    """
    state = trainer.state
    dataset = trainer.dataset
    config = trainer.config
    final = schedule_at(config.total_steps, config, dataset.native_long_side)
    state.field.set_annealing(final.alpha_grid, final.alpha_fourier)
    if views is None:
        views = trainer.holdout_ids or list(range(len(dataset)))

    report = EvaluationReport()
    for i in views:
        view = dataset.views[i]
        target, _ = view.at_resolution(view.long_side)
        rendered = render_image(
            state.field,
            state.pose(i),
            state.lighting(i),
            i,
            (view.width, view.height),
            lambda_b=final.lambda_b,
            n_samples=n_samples or config.n_samples,
            energy_cap=config.shading_energy_cap,
        )
        rgb = np.clip(rendered["rgb"], 0.0, 1.0)
        report.views.append(ViewMetrics(view.name, psnr(rgb, target), ssim(rgb, target)))
        logger.debug(f"Scored {view.name}: psnr {report.views[-1].psnr:.2f}")

    if dataset.has_gt_poses:
        gt = {v.name: v.gt_pose for v in dataset.views}
        report.poses = pose_errors(state.poses(), gt)
        initial = {v.name: v.init_pose for v in dataset.views if v.init_pose is not None}
        report.initial_poses = pose_errors(initial, gt) if initial else None
    logger.info(f"Evaluated {len(report.views)} views: mean PSNR {report.mean_psnr:.2f} dB")
    return report
