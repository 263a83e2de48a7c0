"""
Adam over parameter groups with per-group clipping and exponential learning-rate decay.

A group's learning rate at step ``t`` is ``lr * 0.1 ** (t / decay_steps)``.
Parameters that receive no gradient in a step are left untouched, moments included.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from quadrecon.autodiff import Tensor
from quadrecon.config import TrainConfig


@dataclass
class ParamGroup:
    name: str
    params: List[Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: int = 1
    clip_norm: Optional[float] = None

    def learning_rate(self, step: int) -> float:
        return self.lr * 0.1 ** (step / self.decay_steps)


@dataclass
class _Moments:
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    steps: int = 0


class Adam:
    def __init__(self, groups: List[ParamGroup]):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter group names: {names}")
        self.groups: Dict[str, ParamGroup] = {g.name: g for g in groups}
        self._moments: Dict[str, List[_Moments]] = {
            g.name: [_Moments(np.zeros_like(p.data), np.zeros_like(p.data)) for p in g.params] for g in groups
        }

    def step(self, grads: Mapping[Tensor, np.ndarray], iteration: int) -> Dict[str, float]:
        """Apply one update; returns the pre-clip gradient norm of every touched group."""
        norms = {}
        for group in self.groups.values():
            present = [(i, p, np.asarray(grads[p])) for i, p in enumerate(group.params) if p in grads]
            if not present:
                continue
            total = math.sqrt(sum(float(np.sum(g * g)) for _, _, g in present))
            norms[group.name] = total
            scale = group.clip_norm / total if group.clip_norm is not None and total > group.clip_norm else 1.0
            lr = group.learning_rate(iteration)
            for i, p, g in present:
                g = g * scale
                state = self._moments[group.name][i]
                state.steps += 1
                state.exp_avg = group.beta1 * state.exp_avg + (1.0 - group.beta1) * g
                state.exp_avg_sq = group.beta2 * state.exp_avg_sq + (1.0 - group.beta2) * g * g
                bias_correction1 = 1.0 - group.beta1 ** state.steps
                bias_correction2 = 1.0 - group.beta2 ** state.steps
                denom = np.sqrt(state.exp_avg_sq / bias_correction2) + group.eps
                p.data[...] = p.data - lr * (state.exp_avg / bias_correction1) / denom
        return norms

    def state(self) -> Dict[str, Dict]:
        """Moments as named arrays plus per-parameter step counts."""
        arrays, steps = {}, {}
        for name, moments in self._moments.items():
            for i, state in enumerate(moments):
                arrays[f"{name}.{i}.exp_avg"] = state.exp_avg
                arrays[f"{name}.{i}.exp_avg_sq"] = state.exp_avg_sq
            steps[name] = [state.steps for state in moments]
        return {"arrays": arrays, "steps": steps}

    def load_state(self, arrays: Mapping[str, np.ndarray], steps: Mapping[str, List[int]]) -> None:
        for name, moments in self._moments.items():
            if name not in steps or len(steps[name]) != len(moments):
                raise KeyError(f"optimizer state for group {name!r} does not match")
            for i, state in enumerate(moments):
                state.exp_avg = np.array(arrays[f"{name}.{i}.exp_avg"], dtype=np.float64).reshape(state.exp_avg.shape)
                state.exp_avg_sq = np.array(arrays[f"{name}.{i}.exp_avg_sq"], dtype=np.float64).reshape(state.exp_avg_sq.shape)
                state.steps = int(steps[name][i])


def build_optimizer(
    config: TrainConfig,
    network: List[Tensor],
    grid: List[Tensor],
    camera: List[Tensor],
) -> Adam:
    """The three optimizers of a run as one Adam with ``network``, ``grid`` and ``camera`` groups."""
    return Adam(
        [
            ParamGroup(
                "network",
                network,
                config.lr_network,
                config.beta1,
                config.beta2,
                config.adam_eps,
                decay_steps=config.total_steps,
                clip_norm=config.network_clip_norm,
            ),
            ParamGroup(
                "grid",
                grid,
                config.lr_grid,
                config.beta1,
                config.beta2,
                config.adam_eps,
                decay_steps=config.total_steps,
            ),
            ParamGroup(
                "camera",
                camera,
                config.lr_camera,
                config.camera_beta1,
                config.beta2,
                config.adam_eps,
                decay_steps=config.camera_lr_decay_steps,
                clip_norm=config.camera_clip_norm,
            ),
        ]
    )
