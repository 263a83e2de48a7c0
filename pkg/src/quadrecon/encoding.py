"""
Positional encodings: annealed Fourier features, the multiresolution hash
grid and their hybrid combination.

Both encoders are built only from second-order capable ops, so the density
gradient with respect to position stays differentiable. Coordinates outside
the valid domain are clamped with ``where`` against a constant, which keeps
the clamped components out of the graph instead of breaking it.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from quadrecon.autodiff import MLP, Module, Tensor, ops
from quadrecon.config import FourierSettings, HashGridSettings

logger = logging.getLogger(__name__)

HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

# corner c = ix*4 + iy*2 + iz
CORNER_OFFSETS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


def hann_weight(alpha: float, k: np.ndarray) -> np.ndarray:
    """Truncated Hann window ``(1 - cos(pi * clamp(alpha - k, 0, 1))) / 2``."""
    t = np.clip(alpha - np.asarray(k, dtype=np.float64), 0.0, 1.0)
    return (1.0 - np.cos(np.pi * t)) / 2.0


def _clamp_unit(x: Tensor, lo: float, hi: float):
    """Clamp into [lo, hi]; also returns the per-component outside mask."""
    inside = (x.data >= lo) & (x.data <= hi)
    if inside.all():
        return x, ~inside
    return ops.where(inside, x, np.clip(x.data, lo, hi)), ~inside


class FourierEncoder:
    """Per-axis ``[sin f0 x, cos f0 x, sin f1 x, cos f1 x, ...]`` with Hann annealing.

    ``f_k = pi * (2**k + offset_k)``; the offsets are drawn once and stored.
    """

    def __init__(self, num_frequencies: int, offsets: Optional[np.ndarray] = None):
        if num_frequencies < 1:
            raise ValueError("num_frequencies must be at least 1")
        self.num_frequencies = num_frequencies
        self.offsets = np.zeros(num_frequencies) if offsets is None else np.asarray(offsets, dtype=np.float64)
        if self.offsets.shape != (num_frequencies,):
            raise ValueError(f"expected {num_frequencies} offsets, got shape {self.offsets.shape}")

    @classmethod
    def from_settings(cls, settings: FourierSettings, rng: np.random.Generator) -> "FourierEncoder":
        offsets = rng.uniform(-settings.offset_scale, settings.offset_scale, settings.num_frequencies)
        return cls(settings.num_frequencies, offsets)

    @property
    def frequencies(self) -> np.ndarray:
        return np.pi * (2.0 ** np.arange(self.num_frequencies) + self.offsets)

    @property
    def output_dim(self) -> int:
        return 6 * self.num_frequencies

    def weights(self, alpha: Optional[float]) -> np.ndarray:
        if alpha is None:
            return np.ones(self.num_frequencies)
        alpha = float(np.clip(alpha, 0.0, self.num_frequencies))
        return hann_weight(alpha, np.arange(self.num_frequencies))

    def __call__(self, x: Tensor, alpha: Optional[float] = None) -> Tensor:
        x, _ = _clamp_unit(x, -1.0, 1.0)
        n = x.shape[0]
        scaled = ops.reshape(x, (n, 3, 1)) * self.frequencies
        w = self.weights(alpha)
        pairs = ops.stack([ops.sin(scaled) * w, ops.cos(scaled) * w], axis=-1)
        return ops.reshape(pairs, (n, self.output_dim))


def hash_index(voxel: np.ndarray, level: int, settings: HashGridSettings) -> np.ndarray:
    """Table index of integer voxel corners on one level.

    Levels whose ``(N+1)**3`` vertices fit the table index densely as
    ``x + y*(N+1) + z*(N+1)**2``; finer levels use the XOR spatial hash.
    """
    resolution = settings.resolution(level)
    return _index(np.asarray(voxel, dtype=np.int64), resolution, settings.table_size)


def _index(voxel: np.ndarray, resolution: int, table_size: int) -> np.ndarray:
    side = resolution + 1
    if side**3 <= table_size:
        return voxel[..., 0] + voxel[..., 1] * side + voxel[..., 2] * side * side
    v = voxel.astype(np.uint64)
    with np.errstate(over="ignore"):
        h = (v[..., 0] * HASH_PRIMES[0]) ^ (v[..., 1] * HASH_PRIMES[1]) ^ (v[..., 2] * HASH_PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@dataclass
class GridEncoding:
    features: Tensor
    jacobian: Optional[np.ndarray]
    clamped: np.ndarray


class HashGrid(Module):
    """L feature tables, one per resolution level."""

    def __init__(self, settings: HashGridSettings, rng: np.random.Generator):
        self.settings = settings
        self._resolutions = [settings.resolution(level) for level in range(settings.levels)]
        self._dense = [(n + 1) ** 3 <= settings.table_size for n in self._resolutions]
        sizes = [min(settings.table_size, (n + 1) ** 3) for n in self._resolutions]
        s = settings.init_scale
        self.tables = [
            Tensor(rng.uniform(-s, s, (size, settings.features_per_level)), requires_grad=True, name=f"grid.{level}")
            for level, size in enumerate(sizes)
        ]

    @property
    def levels(self) -> int:
        return self.settings.levels

    @property
    def output_dim(self) -> int:
        return self.settings.output_dim

    def resolution(self, level: int) -> int:
        return self._resolutions[level]

    def is_dense(self, level: int) -> bool:
        return self._dense[level]

    def level_headers(self) -> List[Dict]:
        return [
            {
                "level": level,
                "resolution": self._resolutions[level],
                "layout": "dense" if self._dense[level] else "hashed",
                "features": self.settings.features_per_level,
                "entries": int(self.tables[level].shape[0]),
            }
            for level in range(self.levels)
        ]

    def level_weights(self, alpha: Optional[float]) -> np.ndarray:
        """Level 0 is always on; level l fades in as alpha passes l - 1."""
        if alpha is None:
            return np.ones(self.levels)
        alpha = float(np.clip(alpha, 0.0, self.levels))
        return hann_weight(alpha, np.arange(self.levels) - 1.0)


def _axis_pairs(frac: np.ndarray) -> np.ndarray:
    return np.stack([1.0 - frac, frac], axis=-1)


def grid_encode(x: Tensor, grid: HashGrid, alpha: Optional[float] = None, with_jacobian: bool = False) -> GridEncoding:
    """Trilinear hash-grid features of points in ``[0,1]^3``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x, outside = _clamp_unit(x, 0.0, 1.0)
    clamped = outside.any(axis=-1)
    n = x.shape[0]
    weights = grid.level_weights(alpha)
    feats = []
    jac_blocks = []
    for level in range(grid.levels):
        res = grid.resolution(level)
        f_dim = grid.tables[level].shape[1]
        pos = x * float(res)
        v0 = np.clip(np.floor(pos.data), 0, res - 1).astype(np.int64)
        frac = pos - v0.astype(np.float64)
        corners = v0[:, None, :] + CORNER_OFFSETS[None, :, :]
        idx = _index(corners, res, grid.settings.table_size)
        emb = grid.tables[level][idx]

        pair = ops.stack([1.0 - frac, frac], axis=-1)
        wx = ops.reshape(pair[:, 0, :], (n, 2, 1, 1))
        wy = ops.reshape(pair[:, 1, :], (n, 1, 2, 1))
        wz = ops.reshape(pair[:, 2, :], (n, 1, 1, 2))
        corner_w = ops.reshape(wx * wy * wz, (n, 8, 1))
        out = ops.sum_(emb * corner_w, axis=1) * weights[level]
        feats.append(out)

        if with_jacobian:
            p = _axis_pairs(frac.data)
            d = np.broadcast_to(np.array([-1.0, 1.0]), p.shape)
            jac = np.empty((n, f_dim, 3))
            for axis in range(3):
                parts = [d[:, a] if a == axis else p[:, a] for a in range(3)]
                dw = np.einsum("ni,nj,nk->nijk", *parts).reshape(n, 8)
                jac[:, :, axis] = np.einsum("nc,ncf->nf", dw, emb.data) * res * weights[level]
            jac[np.broadcast_to(outside[:, None, :], jac.shape)] = 0.0
            jac_blocks.append(jac)
    features = ops.concat(feats, axis=-1)
    jacobian = np.concatenate(jac_blocks, axis=1) if with_jacobian else None
    return GridEncoding(features=features, jacobian=jacobian, clamped=clamped)


def grid_weight_decay(grid: HashGrid) -> Tensor:
    """Sum over levels of the mean squared table entry."""
    total = Tensor(0.0)
    for table in grid.tables:
        total = total + ops.mean(table * table)
    return total


class HybridEncoder(Module):
    """``concat(H(x), MLP(gamma(x)))`` with the grid part first.

    Positions arrive in ``[-1,1]^3``; the grid sees them remapped to ``[0,1]^3``.
    """

    def __init__(
        self,
        grid_settings: HashGridSettings,
        fourier_settings: FourierSettings,
        rng: np.random.Generator,
        use_fourier: bool = True,
    ):
        self.grid = HashGrid(grid_settings, rng)
        self.fourier = FourierEncoder.from_settings(fourier_settings, rng)
        self.base_mlp = MLP([self.fourier.output_dim, fourier_settings.hidden_width, 3], rng, activation=ops.silu)
        self.use_fourier = use_fourier

    @property
    def output_dim(self) -> int:
        return self.grid.output_dim + 3

    def __call__(self, x: Tensor, alpha_grid: Optional[float] = None, alpha_fourier: Optional[float] = None) -> Tensor:
        grid_part = grid_encode((x + 1.0) * 0.5, self.grid, alpha_grid).features
        if self.use_fourier:
            base = self.base_mlp(self.fourier(x, alpha_fourier))
        else:
            base = Tensor(np.zeros((x.shape[0], 3)))
        return ops.concat([grid_part, base], axis=-1)
