"""
Training losses: reconstruction, mask ensemble, multiplex consistency,
view importance scaling and regularizers.

Reduction convention: mean over elements inside a term, sum over named terms.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from quadrecon.autodiff import Tensor, ops
from quadrecon.cameras import CameraPose, LossBuffer, derive_direction, project_points
from quadrecon.field import FieldNetwork, FieldOutputs

CHARBONNIER_EPS = 1e-3
BCE_EPS = 1e-6

LOSS_NAMES = (
    "image",
    "mask",
    "silhouette",
    "bce",
    "background",
    "multiplex",
    "ndir",
    "smooth",
    "init",
    "grid_decay",
    "lookat",
    "bounds",
    "offset",
)


@dataclass
class LossReport:
    step: int
    terms: Dict[str, float] = field(default_factory=lambda: {name: 0.0 for name in LOSS_NAMES})
    image_ids: List[str] = field(default_factory=list)
    s_p: Dict[str, float] = field(default_factory=dict)
    s_q: Dict[str, float] = field(default_factory=dict)
    network_loss: float = 0.0
    camera_loss: float = 0.0
    resolution: int = 0
    multiplex_size: int = 1
    rejected: bool = False

    def add(self, name: str, value, weight: float = 1.0) -> None:
        self.terms[name] += weight * float(value.data if isinstance(value, Tensor) else value)

    @property
    def total(self) -> float:
        return self.network_loss + self.camera_loss

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.terms.values()) and math.isfinite(self.total)

    def row(self) -> Dict[str, object]:
        """Flat record for the metrics CSV."""
        row: Dict[str, object] = {
            "step": self.step,
            "total": self.total,
            "network": self.network_loss,
            "camera": self.camera_loss,
        }
        row.update(self.terms)
        row["resolution"] = self.resolution
        row["multiplex"] = self.multiplex_size
        row["s_p"] = ";".join(f"{k}={v:.6g}" for k, v in self.s_p.items())
        row["s_q"] = ";".join(f"{k}={v:.6g}" for k, v in self.s_q.items())
        row["rejected"] = int(self.rejected)
        return row


METRIC_COLUMNS = ["step", "total", "network", "camera", *LOSS_NAMES, "resolution", "multiplex", "s_p", "s_q", "rejected"]


def _t(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def charbonnier(g, p, eps: float = CHARBONNIER_EPS, reduction: str = "mean") -> Tensor:
    """``sqrt((g - p)^2 + eps^2)``."""
    diff = _t(g) - p
    value = ops.sqrt(diff * diff + eps * eps)
    if reduction == "mean":
        return ops.mean(value)
    if reduction == "sum":
        return ops.sum_(value)
    if reduction == "none":
        return value
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class PatchLoss:
    value: Tensor
    levels: int
    single_level_fallback: bool


def _pool2(x: Tensor) -> Tensor:
    s = x.shape[0] // 2
    c = x.shape[2]
    return ops.mean(ops.reshape(x, (s, 2, s, 2, c)), axis=(1, 3))


def multiscale_patch_loss(pred, gt, levels: int = 4) -> PatchLoss:
    """Per-level mean Charbonnier over a half-resolution pyramid, summed over levels.

    Each level is a bilinear downsample by two; on pixel centers that is the
    mean of every 2x2 block.

    Patches smaller than 8 pixels use a single level and are flagged.
    """
    pred, gt = _t(pred), _t(gt)
    if pred.ndim == 2:
        pred, gt = ops.reshape(pred, pred.shape + (1,)), ops.reshape(gt, gt.shape + (1,))
    side = pred.shape[0]
    if pred.shape != gt.shape or pred.shape[1] != side:
        raise ValueError(f"patches must be square and equal, got {pred.shape} and {gt.shape}")
    if side < 8:
        return PatchLoss(charbonnier(gt, pred), 1, True)
    total = charbonnier(gt, pred)
    used = 1
    while used < levels and pred.shape[0] % 2 == 0 and pred.shape[0] >= 2:
        pred, gt = _pool2(pred), _pool2(gt)
        total = total + charbonnier(gt, pred)
        used += 1
    return PatchLoss(total, used, False)


def blur_matrix(side: int) -> np.ndarray:
    """Row-normalized Gaussian blur with sigma = side / 8."""
    sigma = max(side / 8.0, 0.5)
    idx = np.arange(side)
    kernel = np.exp(-((idx[:, None] - idx[None, :]) ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum(axis=1, keepdims=True)


def silhouette_loss(alpha, mask, side: Optional[int] = None) -> Tensor:
    """Mean ``|blur(alpha) - blur(mask)|``; equals the XOR area on binary fields."""
    alpha, mask = _t(alpha), _t(mask)
    k = blur_matrix(side or alpha.shape[0])
    blur_a = k @ alpha @ k.T
    blur_m = k @ mask.data @ k.T
    diff = blur_a - blur_m
    return ops.mean(ops.abs_(diff))


@dataclass
class MaskLoss:
    total: Tensor
    silhouette: Tensor
    bce: Tensor
    background: Tensor


def binary_cross_entropy(alpha, mask) -> Tensor:
    a = ops.clip(_t(alpha), BCE_EPS, 1.0 - BCE_EPS)
    m = np.asarray(_t(mask).data)
    return ops.neg(ops.mean(ops.log(a) * m + ops.log(1.0 - a) * (1.0 - m)))


def background_loss(rgb, mask) -> Tensor:
    """Mean over background pixels of the channel-mean squared rendered color."""
    m = np.asarray(_t(mask).data).reshape(-1)
    bg = 1.0 - m
    if bg.sum() <= 0:
        return Tensor(0.0)
    rgb = ops.reshape(_t(rgb), (m.shape[0], -1))
    per_pixel = ops.mean(rgb * rgb, axis=-1)
    return ops.sum_(per_pixel * bg) / float(bg.sum())


def mask_loss(alpha, mask, rgb, lambda_xor: float = 50.0, patch: bool = True) -> MaskLoss:
    """``lambda_xor * silhouette + BCE + background``; silhouette needs 2-D patches."""
    alpha = _t(alpha)
    sil = silhouette_loss(alpha, mask) if patch and alpha.ndim == 2 else Tensor(0.0)
    bce = binary_cross_entropy(alpha, mask)
    bg = background_loss(rgb, mask)
    return MaskLoss(total=sil * lambda_xor + bce + bg, silhouette=sil, bce=bce, background=bg)


@dataclass
class MemberRender:
    """One multiplex member's rendered pixels."""

    pose: CameraPose
    pixels: np.ndarray  # (P, 2)
    depth: Tensor  # (P,)
    color: Tensor  # (P, 3)
    alpha: Tensor  # (P,)


def multiplex_consistency_loss(
    members: Sequence[MemberRender],
    pose_0: CameraPose,
    render_fn: Callable[[CameraPose, Tensor], Tuple[Tensor, Tensor]],
    size: Optional[Tuple[int, int]] = None,
    min_alpha: float = 0.5,
) -> Tensor:
    """Warp members 1..m-1 into member 0 by rendered depth and compare re-renders.

    ``members[0]`` is the reference and contributes nothing. Only foreground
    pixels (alpha above ``min_alpha``) that land inside camera 0 take part.
    """
    total = Tensor(0.0)
    for member in members[1:]:
        uv, valid = project_points(member.pixels, member.depth, member.pose, pose_0, size)
        valid &= member.alpha.data > min_alpha
        if not valid.any():
            continue
        idx = np.nonzero(valid)[0]
        color0, alpha0 = render_fn(pose_0, uv[idx])
        total = total + charbonnier(member.color[idx], color0) + charbonnier(member.alpha[idx], alpha0)
    return total


def importance_scale_sp(loss_mask: float, loss_image: float, buffer: LossBuffer) -> float:
    """``min(tanh((mu - L) / sigma) + 1, 1)`` over the loss buffer; 1 while it is empty."""
    if len(buffer) == 0:
        return 1.0
    z = (buffer.mean - (loss_mask + loss_image)) / buffer.std
    return float(min(math.tanh(z) + 1.0, 1.0))


def importance_scale_sq(
    prev: float,
    loss_mask: float,
    loss_image: float,
    buffer: LossBuffer,
    lambda_p: float = 0.05,
    sign: int = 1,
) -> float:
    """``prev * lambda_p * min(tanh(sign * (mu - L) / sigma) + 1, 1) + (1 - lambda_p) * prev``."""
    if len(buffer) == 0:
        return prev
    z = sign * (buffer.mean - (loss_mask + loss_image)) / buffer.std
    return float(prev * lambda_p * min(math.tanh(z) + 1.0, 1.0) + (1.0 - lambda_p) * prev)


def camera_regularizers(pose: CameraPose, r_min: float = 1.0, r_max: float = 4.0) -> Dict[str, Tensor]:
    frame = derive_direction(pose)
    to_center = ops.normalize(ops.neg(frame.eye) + pose.center)
    lookat = 1.0 - ops.dot(frame.direction, to_center)
    radius = ops.norm(frame.eye)
    bounds = ops.square(ops.relu(radius - r_max)) + ops.square(ops.relu(r_min - radius))
    offset = ops.mean(ops.square(pose.offsets()))
    return {"lookat": lookat, "bounds": bounds, "offset": offset}


def ndir_loss(weights: Tensor, sample_normals: Tensor, directions: Tensor) -> Tensor:
    """Per-ray ``sum_i w_i max(0, n_i . d)^2`` averaged over rays."""
    d = ops.reshape(directions, (directions.shape[0], 1, 3))
    facing = ops.relu(ops.dot(sample_normals, d))
    return ops.mean(ops.sum_(weights * facing * facing, axis=-1))


def smooth_loss(here: FieldOutputs, jittered: FieldOutputs) -> Tensor:
    """Mean squared change of normal, roughness and metallic under a small jitter."""
    total = Tensor(0.0)
    for name in ("normal", "roughness", "metallic"):
        a, b = getattr(here, name), getattr(jittered, name)
        if a is None or b is None:
            continue
        total = total + ops.mean(ops.square(a - b))
    return total


def surface_smoothness(
    field_net: FieldNetwork,
    points,
    image_index: Optional[int],
    rng: np.random.Generator,
    eps: float = 0.01,
) -> Tensor:
    points = _t(points)
    if points.shape[0] == 0:
        return Tensor(0.0)
    here = field_net.evaluate(points, image_index=image_index, normals=True, brdf=True)
    jitter = rng.normal(size=points.shape) * eps
    there = field_net.evaluate(points + jitter, image_index=image_index, normals=True, brdf=True)
    return smooth_loss(here, there)


def init_loss(pixels, basecolor) -> Tensor:
    """MSE between observed colors and composited basecolor."""
    return ops.mean(ops.square(_t(basecolor) - pixels))
