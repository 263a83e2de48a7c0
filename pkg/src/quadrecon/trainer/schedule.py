"""
Step-indexed training schedule.

Three fades steer the run: ``lambda_b`` blends radiance into BRDF shading
over the annealing phase, ``lambda_c`` drives the resolution ramp and the
multiplex fade-out over the first half, and ``lambda_a`` is the non-linear
loss scaling that retires the basecolor initialization loss.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from quadrecon.config import TrainConfig


@dataclass(frozen=True)
class ScheduleState:
    step: int
    lambda_a: float
    lambda_b: float
    lambda_c: float
    alpha_fourier: Optional[float]
    alpha_grid: Optional[float]
    resolution: int
    multiplex_size: int
    focal_unlocked: bool
    importance_active: bool
    random_rays: bool

    @property
    def brdf_active(self) -> bool:
        return self.lambda_b < 1.0


def smoothstep(x: float) -> float:
    x = float(np.clip(x, 0.0, 1.0))
    return x * x * (3.0 - 2.0 * x)


def multiplex_size_at(m: int, ramp: float) -> int:
    """Halve ``m`` at evenly spaced points of the ramp, reaching 1 when it completes."""
    halvings = math.ceil(math.log2(m)) if m > 1 else 0
    return max(1, m >> math.floor(halvings * ramp))


def schedule_at(step: int, config: TrainConfig, native_long_side: Optional[int] = None) -> ScheduleState:
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    progress = step / total
    anneal = min(progress / config.anneal_end_fraction, 1.0)
    ramp = min(progress / config.ramp_end_fraction, 1.0)

    if config.anneal_encoding:
        alpha_fourier = anneal * config.fourier.num_frequencies
        alpha_grid = anneal * config.grid.levels
    else:
        alpha_fourier = alpha_grid = None

    resolution = int(round(config.resolution_start + (config.resolution_end - config.resolution_start) * ramp))
    if native_long_side is not None:
        resolution = min(resolution, native_long_side)
    multiplex = multiplex_size_at(config.multiplex_size, ramp)

    return ScheduleState(
        step=step,
        lambda_a=1.0 - smoothstep(anneal),
        lambda_b=1.0 - anneal,
        lambda_c=1.0 - ramp,
        alpha_fourier=alpha_fourier,
        alpha_grid=alpha_grid,
        resolution=resolution,
        multiplex_size=multiplex,
        focal_unlocked=progress >= config.focal_unlock_fraction,
        importance_active=config.importance_weighting and progress >= config.importance_start,
        random_rays=step < config.random_ray_steps or not config.patch_losses,
    )
