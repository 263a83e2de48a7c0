"""
Cameras: lookat + direction pose parameterization, quadrant initialization,
camera multiplexes, ray generation, the cross-camera perspective warp and
Procrustes pose evaluation.

Camera frames follow the image convention: columns ``(right, down, forward)``
of a world-from-camera rotation, pixel ``(u, v)`` maps to the camera-space
direction ``(u - w/2, v - h/2, f)``. Poses on disk are 3x4 ``[R | eye]``.
"""

import copy
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from quadrecon.autodiff import Module, Tensor, no_record, ops
from quadrecon.errors import DatasetError, DegeneratePoseError, PixelBoundsError, ProcrustesError

logger = logging.getLogger(__name__)

DEFAULT_FOV_DEG = 53.13
HALF_PI = 0.5 * math.pi
WORLD_UP = np.array([0.0, 1.0, 0.0])
ALT_UP = np.array([0.0, 0.0, 1.0])


def focal_from_fov(fov_deg: float) -> float:
    """Focal length as a multiple of the long image side."""
    return 0.5 / math.tan(math.radians(fov_deg) / 2.0)


class CameraPose(Module):
    """Initial eye position plus learnable offsets, roll and focal length."""

    def __init__(
        self,
        eye: Sequence[float],
        width: int,
        height: int,
        focal: Optional[float] = None,
        center: Sequence[float] = (0.0, 0.0, 0.0),
    ):
        self.eye0 = np.asarray(eye, dtype=np.float64).copy()
        self.center = np.asarray(center, dtype=np.float64).copy()
        self.width = int(width)
        self.height = int(height)
        self.delta_eye = Tensor(np.zeros(3), requires_grad=True)
        self.delta_dir = Tensor(np.zeros(2), requires_grad=True)  # (theta, phi)
        self.roll = Tensor(np.zeros(1), requires_grad=True)
        self.focal = Tensor([focal_from_fov(DEFAULT_FOV_DEG) if focal is None else focal], requires_grad=True)

    @property
    def long_side(self) -> int:
        return max(self.width, self.height)

    def set_direction_offset(self, theta: float, phi: float) -> None:
        self.delta_dir.data[:] = (theta, phi)
        self.clamp_()

    def clamp_(self) -> None:
        """Keep direction offsets in [-pi/2, pi/2] and the focal length positive."""
        np.clip(self.delta_dir.data, -HALF_PI, HALF_PI, out=self.delta_dir.data)
        np.maximum(self.focal.data, 0.05, out=self.focal.data)

    def offsets(self) -> Tensor:
        return ops.concat([self.delta_eye, self.delta_dir, self.roll], axis=0)

    def eye(self) -> Tensor:
        return self.delta_eye + self.eye0

    def clone(self) -> "CameraPose":
        other = copy.copy(self)
        other.eye0 = self.eye0.copy()
        other.center = self.center.copy()
        for name in ("delta_eye", "delta_dir", "roll", "focal"):
            setattr(other, name, Tensor(getattr(self, name).data.copy(), requires_grad=True))
        return other

    def matrix(self) -> np.ndarray:
        """Current world-from-camera ``[R | eye]`` as a (3, 4) array."""
        with no_record():
            frame = derive_direction(self)
        return np.concatenate([frame.rotation.data, frame.eye.data[:, None]], axis=1)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, width: int, height: int, focal: Optional[float] = None) -> "CameraPose":
        """Pose whose derived frame reproduces ``matrix`` (offsets clamped to range)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        pose = cls(matrix[:, 3], width, height, focal)
        base = pose.center - pose.eye0
        base = base / np.linalg.norm(base)
        forward = matrix[:, 2] / np.linalg.norm(matrix[:, 2])
        d_theta = math.asin(np.clip(forward[1], -1, 1)) - math.asin(np.clip(base[1], -1, 1))
        d_phi = math.atan2(forward[0], forward[2]) - math.atan2(base[0], base[2])
        d_phi = (d_phi + math.pi) % (2 * math.pi) - math.pi
        pose.set_direction_offset(d_theta, d_phi)
        right0, down0 = _base_axes(forward)
        pose.roll.data[0] = math.atan2(float(matrix[:, 0] @ down0), float(matrix[:, 0] @ right0))
        return pose


@dataclass
class CameraFrame:
    direction: Tensor
    rotation: Tensor
    eye: Tensor


def _base_axes(forward: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    up = WORLD_UP if np.linalg.norm(np.cross(forward, WORLD_UP)) > 1e-6 else ALT_UP
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    return right, np.cross(forward, right)


def _cross(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    return ops.stack(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]],
        axis=0,
    )


def derive_direction(pose: CameraPose) -> CameraFrame:
    """View direction and world-from-camera rotation of a pose.

    ``d = center - eye``; ``theta = asin(d_y/|d|) + dtheta``,
    ``phi = atan2(d_x, d_z) + dphi``, ``d_hat = (cos t sin p, sin t, cos t cos p)``.
    """
    eye = pose.eye()
    d = ops.neg(eye) + pose.center
    length = ops.norm(d)
    if length.data < 1e-9:
        raise DegeneratePoseError("eye coincides with the look-at center", {"eye": eye.data.tolist()})
    theta = ops.arcsin(d[1] / length) + pose.delta_dir[0]
    phi = ops.atan2(d[0], d[2]) + pose.delta_dir[1]
    ct = ops.cos(theta)
    forward = ops.stack([ct * ops.sin(phi), ops.sin(theta), ct * ops.cos(phi)], axis=0)

    up = WORLD_UP if np.linalg.norm(np.cross(forward.data, WORLD_UP)) > 1e-6 else ALT_UP
    right0 = ops.normalize(_cross(forward, up))
    down0 = _cross(forward, right0)
    cr, sr = ops.cos(pose.roll[0]), ops.sin(pose.roll[0])
    right = right0 * cr + down0 * sr
    down = down0 * cr - right0 * sr
    rotation = ops.stack([right, down, forward], axis=1)
    return CameraFrame(direction=forward, rotation=rotation, eye=eye)


@dataclass
class Rays:
    origins: Tensor
    directions: Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]


def patch_pixels(x0: int, y0: int, size: int) -> np.ndarray:
    """Pixel-center coordinates of a square patch, row-major, shape (size*size, 2)."""
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return np.stack([x0 + xs.ravel() + 0.5, y0 + ys.ravel() + 0.5], axis=-1)


def generate_rays(
    pose: CameraPose,
    pixels,
    size: Optional[Tuple[int, int]] = None,
    frame: Optional[CameraFrame] = None,
    check_bounds: bool = True,
) -> Rays:
    """Pinhole rays through continuous pixel positions ``(u, v)``.

    ``size`` is the ``(width, height)`` the pixels refer to; the focal length
    scales with its long side. Pixel ``(w/2, h/2)`` lies on the optical axis.
    """
    w, h = size or (pose.width, pose.height)
    uv = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels, dtype=np.float64).reshape(-1, 2))
    if check_bounds:
        u, v = uv.data[:, 0], uv.data[:, 1]
        if (u < 0).any() or (v < 0).any() or (u > w).any() or (v > h).any():
            raise PixelBoundsError(f"pixel outside the {w}x{h} image", {"width": w, "height": h})
    frame = frame or derive_direction(pose)
    n = uv.shape[0]
    focal = pose.focal * float(max(w, h))
    centered = uv - np.array([w / 2.0, h / 2.0])
    cam = ops.concat([centered, ops.broadcast_to(ops.reshape(focal, (1, 1)), (n, 1))], axis=-1)
    directions = ops.normalize(cam @ ops.swapaxes(frame.rotation))
    origins = ops.broadcast_to(ops.reshape(frame.eye, (1, 3)), (n, 3))
    return Rays(origins=origins, directions=directions)


def project_points(
    pixels,
    depths,
    pose_i: CameraPose,
    pose_0: CameraPose,
    size: Optional[Tuple[int, int]] = None,
) -> Tuple[Tensor, np.ndarray]:
    """Warp pixels of camera i, lifted to ``depths`` along their rays, into camera 0.

    Returns pixel positions in camera 0 and a validity mask; points behind
    camera 0 or outside its image are invalid.
    """
    w, h = size or (pose_0.width, pose_0.height)
    depths = depths if isinstance(depths, Tensor) else Tensor(depths)
    rays = generate_rays(pose_i, pixels, size=(w, h), check_bounds=False)
    points = rays.origins + rays.directions * ops.reshape(depths, (-1, 1))
    frame0 = derive_direction(pose_0)
    local = (points - ops.reshape(frame0.eye, (1, 3))) @ frame0.rotation
    z = local[:, 2]
    safe_z = ops.where(z.data > 1e-6, z, 1.0)
    focal = pose_0.focal[0] * float(max(w, h))
    u = local[:, 0] * focal / safe_z + w / 2.0
    v = local[:, 1] * focal / safe_z + h / 2.0
    uv = ops.stack([u, v], axis=-1)
    valid = (z.data > 1e-6) & (u.data >= 0) & (u.data <= w) & (v.data >= 0) & (v.data <= h)
    return uv, valid


# ---------------------------------------------------------------- quadrants


@dataclass(frozen=True)
class QuadrantLabel:
    right: bool
    above: bool
    front: bool

    @classmethod
    def parse(cls, text: str) -> "QuadrantLabel":
        letters = text.replace(" ", "").upper()
        if len(letters) != 3 or letters[0] not in "LR" or letters[1] not in "AB" or letters[2] not in "FK":
            raise ValueError(f"bad quadrant label {text!r}")
        return cls(letters[0] == "R", letters[1] == "A", letters[2] == "F")

    @classmethod
    def from_eye(cls, eye: Sequence[float]) -> "QuadrantLabel":
        return cls(eye[0] > 0, eye[1] > 0, eye[2] > 0)

    def signs(self) -> np.ndarray:
        return np.array([1.0 if self.right else -1.0, 1.0 if self.above else -1.0, 1.0 if self.front else -1.0])

    def __str__(self) -> str:
        return f"{'R' if self.right else 'L'} {'A' if self.above else 'B'} {'F' if self.front else 'K'}"


def _spherical(theta: float, phi: float) -> np.ndarray:
    return np.array([math.cos(theta) * math.sin(phi), math.sin(theta), math.cos(theta) * math.cos(phi)])


def quadrant_init(
    label: QuadrantLabel,
    radius: float,
    seed: Optional[int],
    width: int = 64,
    height: int = 64,
    jitter_deg: float = 20.0,
) -> CameraPose:
    """Pose at the octant's canonical direction with uniform azimuth/elevation jitter."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    canonical = label.signs() / math.sqrt(3.0)
    theta0 = math.asin(canonical[1])
    phi0 = math.atan2(canonical[0], canonical[2])
    rng = np.random.default_rng(seed)
    jitter = math.radians(jitter_deg)
    theta = theta0 + (rng.uniform(-jitter, jitter) if jitter > 0 else 0.0)
    phi = phi0 + (rng.uniform(-jitter, jitter) if jitter > 0 else 0.0)
    return CameraPose(radius * _spherical(theta, phi), width, height)


# ---------------------------------------------------------------- multiplex


class LossBuffer:
    """Circular buffer of recent per-image losses."""

    def __init__(self, capacity: int = 1000, floor: float = 1e-8):
        self.values: deque = deque(maxlen=capacity)
        self.floor = floor

    def push(self, value: float) -> None:
        self.values.append(float(value))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else 0.0

    @property
    def std(self) -> float:
        if not self.values:
            return self.floor
        return max(float(np.std(self.values)), self.floor)

    def state(self) -> Dict:
        return {"capacity": self.values.maxlen, "values": list(self.values)}

    @classmethod
    def from_state(cls, state: Dict) -> "LossBuffer":
        buffer = cls(state["capacity"])
        buffer.values.extend(state["values"])
        return buffer


@dataclass
class Multiplex:
    """Pose hypotheses for one image; member 0 is the current best."""

    members: List[CameraPose]
    uids: List[int]
    smoothed: List[Optional[float]] = field(default_factory=list)
    smoothing: float = 0.9

    def __post_init__(self):
        if not self.members:
            raise ValueError("a multiplex needs at least one member")
        if not self.smoothed:
            self.smoothed = [None] * len(self.members)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def best(self) -> CameraPose:
        return self.members[0]

    def record_losses(self, losses: Sequence[float]) -> None:
        for i, loss in enumerate(losses):
            prev = self.smoothed[i]
            self.smoothed[i] = float(loss) if prev is None else self.smoothing * prev + (1 - self.smoothing) * float(loss)

    def rank(self) -> None:
        """Reorder members by (smoothed loss, position); unscored members rank last."""
        order = sorted(
            range(len(self.members)),
            key=lambda i: (self.smoothed[i] is None, self.smoothed[i] or 0.0, i),
        )
        if order != list(range(len(self.members))):
            logger.debug(f"Multiplex re-ranked: {order}")
        self.members = [self.members[i] for i in order]
        self.uids = [self.uids[i] for i in order]
        self.smoothed = [self.smoothed[i] for i in order]


def _orbit(eye: np.ndarray, d_theta: float, d_phi: float) -> np.ndarray:
    radius = float(np.linalg.norm(eye))
    theta = math.asin(np.clip(eye[1] / radius, -1, 1)) + d_theta
    theta = float(np.clip(theta, -HALF_PI + 1e-3, HALF_PI - 1e-3))
    phi = math.atan2(eye[0], eye[2]) + d_phi
    return radius * _spherical(theta, phi)


def spawn_multiplex(pose: CameraPose, m: int, jitter: float, seed: Optional[int]) -> Multiplex:
    """``m`` hypotheses; member 0 is ``pose`` itself, the rest orbit it by up to ``jitter`` radians."""
    if m < 1:
        raise ValueError("multiplex size must be at least 1")
    rng = np.random.default_rng(seed)
    members = [pose.clone()]
    for _ in range(m - 1):
        member = pose.clone()
        if jitter > 0:
            member.eye0 = _orbit(pose.eye0, rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter))
        members.append(member)
    return Multiplex(members=members, uids=list(range(m)))


def fade_multiplex(mux: Multiplex, target_size: int = 1) -> Multiplex:
    """Drop the worst-ranked members until ``target_size`` remain (never below one)."""
    target = max(1, int(target_size))
    if len(mux) <= target:
        return mux
    mux.rank()
    while len(mux) > target:
        logger.debug(f"Fading multiplex member uid={mux.uids[-1]} loss={mux.smoothed[-1]}")
        mux.members.pop()
        mux.uids.pop()
        mux.smoothed.pop()
    return mux


# ---------------------------------------------------------------- Procrustes


@dataclass
class ProcrustesResult:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    rotation_errors: np.ndarray
    translation_errors: np.ndarray

    @property
    def rotation_error_mean(self) -> float:
        return float(np.mean(self.rotation_errors))

    @property
    def rotation_error_std(self) -> float:
        return float(np.std(self.rotation_errors))

    @property
    def translation_error_mean(self) -> float:
        return float(np.mean(self.translation_errors))

    @property
    def translation_error_std(self) -> float:
        return float(np.std(self.translation_errors))


def similarity_transform(target: np.ndarray, source: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Umeyama: ``R, t, c`` with ``c * R @ source_i + t ~ target_i``."""
    n = target.shape[0]
    mean_t = target.mean(axis=0)
    mean_s = source.mean(axis=0)
    var_s = np.mean(np.sum((source - mean_s) ** 2, axis=1))
    cov = (target - mean_t).T @ (source - mean_s) / n
    U, D, VT = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U) * np.linalg.det(VT))
    S = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ S @ VT
    c = float(np.trace(np.diag(D) @ S) / var_s)
    t = mean_t - c * R @ mean_s
    return R, t, c


def geodesic_deg(a: np.ndarray, b: np.ndarray) -> float:
    cos = (np.trace(a.T @ b) - 1.0) / 2.0
    return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))


def procrustes_align(estimated: Sequence[np.ndarray], reference: Sequence[np.ndarray]) -> ProcrustesResult:
    """Align estimated camera eyes to reference eyes and report per-view errors."""
    est = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 3 or est.shape[1:] != (3, 4):
        raise ProcrustesError("pose sets must both have shape (N, 3, 4)", {"estimated": est.shape, "reference": ref.shape})
    if est.shape[0] < 3:
        raise ProcrustesError("Procrustes alignment needs at least 3 pose pairs", {"pairs": est.shape[0]})
    eyes_est, eyes_ref = est[:, :, 3], ref[:, :, 3]
    for name, eyes in (("estimated", eyes_est), ("reference", eyes_ref)):
        sv = np.linalg.svd(eyes - eyes.mean(axis=0), compute_uv=False)
        if sv[0] < 1e-12 or sv[1] < 1e-9 * max(sv[0], 1.0):
            raise ProcrustesError(f"{name} camera positions are degenerate (collinear)", {"singular_values": sv.tolist()})
    R, t, c = similarity_transform(eyes_ref, eyes_est)
    aligned_eyes = c * eyes_est @ R.T + t
    rot_err = np.array([geodesic_deg(R @ e[:, :3], r[:, :3]) for e, r in zip(est, ref)])
    trans_err = np.linalg.norm(aligned_eyes - eyes_ref, axis=1)
    return ProcrustesResult(rotation=R, translation=t, scale=c, rotation_errors=rot_err, translation_errors=trans_err)


# ---------------------------------------------------------------- sidecar files


def write_pose_blocks(path: Path, poses: Dict[str, np.ndarray]) -> None:
    """One block per view: a ``# name`` line followed by three matrix rows."""
    lines = []
    for name, matrix in poses.items():
        lines.append(f"# {name}")
        for row in np.asarray(matrix).reshape(3, 4):
            lines.append(" ".join(f"{v:.17g}" for v in row))
        lines.append("")
    Path(path).write_text("\n".join(lines))


def read_pose_blocks(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError("pose file not found", str(path))
    poses: Dict[str, np.ndarray] = {}
    name, rows = None, []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            name, rows = line[1:].strip(), []
            continue
        if name is None:
            raise DatasetError(f"matrix row before any '# name' header (line {lineno})", str(path))
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError as exc:
            raise DatasetError(f"bad number on line {lineno}", str(path)) from exc
        if len(rows) == 3:
            matrix = np.array(rows)
            if matrix.shape != (3, 4):
                raise DatasetError(f"pose block '{name}' is not 3x4", str(path))
            poses[name] = matrix
            name, rows = None, []
    return poses


def write_quadrants(path: Path, labels: Dict[str, QuadrantLabel]) -> None:
    Path(path).write_text("".join(f"{name} {label}\n" for name, label in labels.items()))


def read_quadrants(path: Path) -> Dict[str, QuadrantLabel]:
    """Sidecar with one ``image_name L|R A|B F|K`` line per image."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError("quadrant file not found", str(path))
    labels = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise DatasetError(f"expected 'name L|R A|B F|K' on line {lineno}", str(path))
        try:
            labels[parts[0]] = QuadrantLabel.parse("".join(parts[1:]))
        except ValueError as exc:
            raise DatasetError(f"{exc} on line {lineno}", str(path)) from exc
    return labels
