"""
The optimization loop.

Each step renders a few patches (random rays during warm-up) for every live
multiplex member of a handful of training views, then takes two gradient
passes over one tape: the network loss for field, grid and illumination
parameters, and the camera loss for the pose parameters.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from quadrecon.autodiff import Tape, Tensor, ops
from quadrecon.cameras import CameraPose, LossBuffer, fade_multiplex, generate_rays, patch_pixels, write_pose_blocks
from quadrecon.config import TrainConfig, config_hash
from quadrecon.dataset import ILLUMINATION_DIR, SceneDataset
from quadrecon.encoding import grid_weight_decay
from quadrecon.errors import ConfigError, NonFiniteError, QuadreconError
from quadrecon.illumination import SGLighting
from quadrecon.losses import (
    METRIC_COLUMNS,
    LossReport,
    MaskLoss,
    MemberRender,
    camera_regularizers,
    charbonnier,
    importance_scale_sp,
    importance_scale_sq,
    init_loss,
    mask_loss,
    multiplex_consistency_loss,
    multiscale_patch_loss,
    ndir_loss,
    surface_smoothness,
)
from quadrecon.render import RayMarchResult, render_rays
from quadrecon.trainer.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from quadrecon.trainer.optim import Adam, ParamGroup, build_optimizer
from quadrecon.trainer.schedule import ScheduleState, schedule_at
from quadrecon.trainer.state import ReconstructionState

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.qrck"
METRICS_NAME = "metrics.csv"
POSES_NAME = "poses.txt"
SMOOTH_POINTS = 32


@dataclass
class ViewBatch:
    """Pixels of one view for one step, at the scheduled resolution."""

    index: int
    pixels: np.ndarray  # (P, 2)
    size: Tuple[int, int]
    target: np.ndarray  # (side, side, 3) for patches, (P, 3) for random rays
    mask: np.ndarray
    side: Optional[int] = None

    @property
    def is_patch(self) -> bool:
        return self.side is not None


@dataclass
class HoldoutResult:
    views: List[str]
    checksum_before: str
    checksum_after: str
    final_losses: Dict[str, float]


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        dataset: SceneDataset,
        out_dir: Optional[Path] = None,
        state: Optional[ReconstructionState] = None,
    ):
        self.config = config
        self.dataset = dataset
        self.train_ids, self.holdout_ids = dataset.split(config)
        self.state = state or ReconstructionState.from_dataset(config, dataset, self.holdout_ids)
        if self.state.names != dataset.names:
            raise ConfigError("reconstruction views do not match the dataset", {"views": self.state.names})
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rng = np.random.default_rng([config.seed, 3])
        self.buffer = LossBuffer(config.loss_buffer_size)
        self.s_q = [1.0] * len(dataset)
        self.step = 0
        self.rejected = 0
        self.history: List[LossReport] = []
        self.optimizer = build_optimizer(
            config,
            network=self.state.network_parameters() + self.state.illumination_parameters(self.train_ids),
            grid=self.state.grid_parameters(),
            camera=self.state.camera_parameters(),
        )
        logger.info(
            f"Trainer ready: {len(self.train_ids)} training views, {len(self.holdout_ids)} held out, "
            f"config {config_hash(config)[:12]}"
        )

    # ------------------------------------------------------------ batches

    def _sample(self, index: int, schedule: ScheduleState) -> ViewBatch:
        config = self.config
        target, mask = self.dataset.views[index].at_resolution(schedule.resolution)
        h, w = mask.shape
        if schedule.random_rays:
            count = max(1, config.rays_per_batch // config.patches_per_step)
            ys, xs = np.divmod(self.rng.integers(0, w * h, count), w)
            pixels = np.stack([xs + 0.5, ys + 0.5], axis=-1)
            return ViewBatch(index, pixels, (w, h), target[ys, xs], mask[ys, xs])
        side = min(config.patch_size, w, h)
        x0 = int(self.rng.integers(0, w - side + 1))
        y0 = int(self.rng.integers(0, h - side + 1))
        return ViewBatch(
            index,
            patch_pixels(x0, y0, side),
            (w, h),
            target[y0:y0 + side, x0:x0 + side],
            mask[y0:y0 + side, x0:x0 + side],
            side,
        )

    def _render(
        self,
        pose: CameraPose,
        pixels,
        size: Tuple[int, int],
        index: int,
        lighting: SGLighting,
        schedule: ScheduleState,
        check_bounds: bool = True,
    ) -> RayMarchResult:
        rays = generate_rays(pose, pixels, size=size, check_bounds=check_bounds)
        return render_rays(
            self.state.field,
            rays,
            lighting,
            index,
            schedule.lambda_b,
            self.config.n_samples,
            self.rng,
            energy_cap=self.config.shading_energy_cap,
        )

    def _reconstruction(self, result: RayMarchResult, batch: ViewBatch) -> Tuple[Tensor, MaskLoss]:
        if batch.is_patch and self.config.patch_losses:
            s = batch.side
            rgb = ops.reshape(result.color, (s, s, 3))
            image = multiscale_patch_loss(rgb, batch.target).value
            masks = mask_loss(ops.reshape(result.alpha, (s, s)), batch.mask, rgb, self.config.lambda_xor)
            return image, masks
        target = batch.target.reshape(-1, 3)
        image = charbonnier(target, result.color)
        masks = mask_loss(result.alpha, batch.mask.reshape(-1), result.color, self.config.lambda_xor, patch=False)
        return image, masks

    def _brdf_losses(self, result: RayMarchResult, batch: ViewBatch, schedule: ScheduleState) -> Dict[str, Tensor]:
        config = self.config
        ndir = ndir_loss(result.weights, result.sample_normals, result.directions)
        init = init_loss(batch.target.reshape(-1, 3), result.basecolor)
        foreground = np.nonzero(result.alpha.data > 0.5)[0]
        if foreground.size > SMOOTH_POINTS:
            foreground = np.sort(self.rng.choice(foreground, SMOOTH_POINTS, replace=False))
        eye = self.state.pose(batch.index).eye().data
        points = eye + result.directions.data[foreground] * result.depth.data[foreground][:, None]
        smooth = surface_smoothness(self.state.field, points, batch.index, self.rng)
        total = ndir * config.lambda_ndir + smooth * config.lambda_smooth + init * schedule.lambda_a
        return {"ndir": ndir, "smooth": smooth, "init": init, "total": total}

    # ------------------------------------------------------------ one step

    def train_step(self) -> LossReport:
        config = self.config
        state = self.state
        schedule = schedule_at(self.step, config, self.dataset.native_long_side)
        state.field.set_annealing(schedule.alpha_grid, schedule.alpha_fourier)

        count = min(config.patches_per_step, len(self.train_ids))
        views = [int(v) for v in self.rng.choice(self.train_ids, size=count, replace=False)]
        report = LossReport(
            step=self.step,
            image_ids=[state.names[j] for j in views],
            resolution=schedule.resolution,
            multiplex_size=schedule.multiplex_size,
        )
        weight = 1.0 / len(views)
        pushes: List[Tuple[int, float, float]] = []
        member_losses: Dict[int, List[float]] = {}
        try:
            with Tape() as tape:
                network_total = Tensor(0.0)
                camera_total = Tensor(0.0)
                for j in views:
                    batch = self._sample(j, schedule)
                    lighting = state.lighting(j)
                    active = self._active(j, schedule.multiplex_size)
                    results = [self._render(pose, batch.pixels, batch.size, j, lighting, schedule) for pose in active]
                    losses = [self._reconstruction(r, batch) for r in results]
                    image0, mask0 = losses[0]

                    s_p, s_q = 1.0, self.s_q[j]
                    if schedule.importance_active:
                        s_p = importance_scale_sp(float(mask0.total.data), float(image0.data), self.buffer)
                        s_q = importance_scale_sq(
                            self.s_q[j],
                            float(mask0.total.data),
                            float(image0.data),
                            self.buffer,
                            config.lambda_p,
                            config.camera_importance_sign,
                        )
                    report.s_p[state.names[j]] = s_p
                    report.s_q[state.names[j]] = s_q
                    pushes.append((j, float(mask0.total.data + image0.data), s_q))

                    network = image0 + mask0.total
                    for name in ("silhouette", "bce", "background"):
                        report.add(name, getattr(mask0, name), weight)
                    report.add("image", image0, weight)
                    report.add("mask", mask0.total, weight)
                    if len(active) > 1 and config.use_multiplex_consistency:
                        members = [
                            MemberRender(pose, batch.pixels, r.depth, r.color, r.alpha)
                            for pose, r in zip(active, results)
                        ]

                        def render_fn(pose0: CameraPose, uv: Tensor, j=j, lighting=lighting, size=batch.size):
                            res = self._render(pose0, uv, size, j, lighting, schedule, check_bounds=False)
                            return res.color, res.alpha

                        consistency = multiplex_consistency_loss(members, active[0], render_fn, batch.size)
                        network = network + consistency * config.multiplex_weight
                        report.add("multiplex", consistency, weight)
                    if results[0].shaded is not None:
                        brdf = self._brdf_losses(results[0], batch, schedule)
                        network = network + brdf["total"]
                        for name in ("ndir", "smooth", "init"):
                            report.add(name, brdf[name], weight)
                    network_total = network_total + network * (s_p * weight)

                    for pose, (image, masks) in zip(active, losses):
                        regs = camera_regularizers(pose, config.bounds_r_min, config.bounds_r_max)
                        camera = (image + masks.total) * s_q
                        camera = camera + regs["lookat"] * config.lambda_lookat + regs["bounds"] * config.lambda_bounds
                        camera = camera + regs["offset"] * config.lambda_offset
                        camera_total = camera_total + camera * weight
                        for name, value in regs.items():
                            report.add(name, value, weight)
                    member_losses[j] = [float(im.data + mk.total.data) for im, mk in losses]

                decay = grid_weight_decay(state.field.encoder.grid)
                report.add("grid_decay", decay)
                network_total = network_total + decay * config.grid_decay_weight

            network_params = state.network_parameters(brdf=schedule.brdf_active or not config.freeze_brdf_while_radiance)
            network_params += state.illumination_parameters(views)
            grid_params = state.grid_parameters()
            camera_params = [
                p
                for j in views
                for pose in self._active(j, schedule.multiplex_size)
                for p in (pose.delta_eye, pose.delta_dir, pose.roll) + ((pose.focal,) if schedule.focal_unlocked else ())
            ]
            sources = network_params + grid_params
            grads = dict(zip(sources, (g.data for g in tape.gradient(network_total, sources))))
            grads.update(zip(camera_params, (g.data for g in tape.gradient(camera_total, camera_params))))
        except NonFiniteError as exc:
            return self._reject(report, str(exc))

        report.network_loss = float(network_total.data)
        report.camera_loss = float(camera_total.data)
        if not report.is_finite() or not all(np.isfinite(g).all() for g in grads.values()):
            return self._reject(report, "non-finite loss or gradient")

        self.optimizer.step(grads, self.step)
        for i in self.train_ids:
            fade_multiplex(state.multiplexes[i], schedule.multiplex_size)
        for j in views:
            for pose in state.multiplexes[j].members:
                pose.clamp_()
            state.multiplexes[j].record_losses(member_losses[j])
            state.multiplexes[j].rank()
        for j, loss, s_q in pushes:
            self.buffer.push(loss)
            self.s_q[j] = s_q
        return self._finish(report)

    def _active(self, index: int, size: int) -> List[CameraPose]:
        """The ``size`` leading members; the multiplex is pruned to them only once a step is accepted."""
        return self.state.multiplexes[index].members[:max(1, size)]

    def _reject(self, report: LossReport, reason: str) -> LossReport:
        self.rejected += 1
        report.rejected = True
        logger.warning(f"Rejected step {self.step}: {reason}; parameters left unchanged")
        return self._finish(report)

    def _finish(self, report: LossReport) -> LossReport:
        self.history.append(report)
        self._write_metrics(report)
        if self.step % self.config.log_every == 0:
            logger.info(
                f"step {self.step}/{self.config.total_steps} loss={report.total:.5f} "
                f"res={report.resolution} multiplex={report.multiplex_size}"
            )
        self.step += 1
        if self.config.checkpoint_every and self.out_dir and self.step % self.config.checkpoint_every == 0:
            self.save(self.out_dir / CHECKPOINT_NAME)
        return report

    def _write_metrics(self, report: LossReport) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / METRICS_NAME
        new = not path.exists() or self.step == 0
        with path.open("w" if new else "a", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS)
            if new:
                writer.writeheader()
            writer.writerow(report.row())

    def train(self, steps: Optional[int] = None, callback: Optional[Callable[[LossReport], None]] = None) -> List[LossReport]:
        """Run until ``total_steps`` (or ``steps`` more steps, whichever comes first)."""
        end = self.config.total_steps if steps is None else min(self.config.total_steps, self.step + steps)
        while self.step < end:
            report = self.train_step()
            if callback is not None:
                callback(report)
        return self.history

    # ------------------------------------------------------------ hold-out views

    def holdout(self, steps: Optional[int] = None) -> HoldoutResult:
        """Fit held-out cameras and illumination against the frozen field."""
        config = self.config
        state = self.state
        steps = config.holdout_steps if steps is None else steps
        final = schedule_at(config.total_steps, config, self.dataset.native_long_side)
        state.field.set_annealing(final.alpha_grid, final.alpha_fourier)
        before = state.field_checksum()
        cameras = [p for j in self.holdout_ids for p in state.pose(j).parameters()]
        lights = state.illumination_parameters(self.holdout_ids)
        optimizer = Adam(
            [
                ParamGroup(
                    "camera",
                    cameras,
                    config.lr_camera,
                    config.camera_beta1,
                    config.beta2,
                    config.adam_eps,
                    decay_steps=config.camera_lr_decay_steps,
                    clip_norm=config.camera_clip_norm,
                ),
                ParamGroup(
                    "illumination",
                    lights,
                    config.lr_network,
                    config.beta1,
                    config.beta2,
                    config.adam_eps,
                    decay_steps=max(steps, 1),
                ),
            ]
        )
        patched = replace(final, random_rays=not config.patch_losses)
        final_losses: Dict[str, float] = {}
        for it in range(steps):
            for j in self.holdout_ids:
                pose = state.pose(j)
                batch = self._sample(j, patched)
                try:
                    with Tape() as tape:
                        result = self._render(pose, batch.pixels, batch.size, j, state.lighting(j), final)
                        image, masks = self._reconstruction(result, batch)
                        regs = camera_regularizers(pose, config.bounds_r_min, config.bounds_r_max)
                        loss = image + masks.total + regs["lookat"] * config.lambda_lookat + regs["bounds"] * config.lambda_bounds
                    sources = pose.parameters() + state.lights[j].parameters()
                    grads = tape.gradient(loss, sources)
                except NonFiniteError as exc:
                    logger.warning(f"Hold-out step {it} for {state.names[j]} rejected: {exc}")
                    continue
                optimizer.step({p: g.data for p, g in zip(sources, grads)}, it)
                pose.clamp_()
                final_losses[state.names[j]] = float(loss.data)
        after = state.field_checksum()
        if after != before:
            raise QuadreconError("field parameters changed during hold-out optimization", {"before": before, "after": after})
        logger.info(f"Hold-out protocol fitted {len(self.holdout_ids)} views for {steps} steps")
        return HoldoutResult([state.names[j] for j in self.holdout_ids], before, after, final_losses)

    # ------------------------------------------------------------ persistence

    def checkpoint(self) -> Checkpoint:
        checkpoint = Checkpoint()
        self.state.write_sections(checkpoint)
        optimizer = self.optimizer.state()
        checkpoint.add("optimizer", optimizer["arrays"], meta={"steps": optimizer["steps"]})
        checkpoint.add(
            "trainer",
            meta={
                "step": self.step,
                "rejected": self.rejected,
                "rng": self.rng.bit_generator.state,
                "buffer": self.buffer.state(),
                "s_q": list(self.s_q),
                "train": self.train_ids,
                "holdout": self.holdout_ids,
            },
        )
        return checkpoint

    def save(self, path: Path) -> str:
        return save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, path: Path, dataset: SceneDataset, out_dir: Optional[Path] = None) -> "Trainer":
        checkpoint = load_checkpoint(path)
        state = ReconstructionState.from_checkpoint(checkpoint)
        trainer = cls(state.config, dataset, out_dir, state=state)
        optimizer = checkpoint.section("optimizer")
        trainer.optimizer.load_state(optimizer.tensors, optimizer.meta["steps"])
        meta = checkpoint.section("trainer").meta
        trainer.step = int(meta["step"])
        trainer.rejected = int(meta["rejected"])
        trainer.rng.bit_generator.state = meta["rng"]
        trainer.buffer = LossBuffer.from_state(meta["buffer"])
        trainer.s_q = [float(v) for v in meta["s_q"]]
        logger.info(f"Resumed from {path} at step {trainer.step}")
        return trainer

    def export(self, out_dir: Optional[Path] = None) -> Path:
        """Write recovered poses, per-view illumination and the final checkpoint."""
        out = Path(out_dir or self.out_dir or ".")
        (out / ILLUMINATION_DIR).mkdir(parents=True, exist_ok=True)
        write_pose_blocks(out / POSES_NAME, self.state.poses())
        for i, name in enumerate(self.state.names):
            self.state.lighting(i).to_spec().write(out / ILLUMINATION_DIR / f"{name}.json")
        self.save(out / CHECKPOINT_NAME)
        return out


def summarize(history: Sequence[LossReport], last: int = 50) -> Dict[str, float]:
    """Mean of every loss term over the last ``last`` accepted steps."""
    accepted = [r for r in history if not r.rejected][-last:]
    if not accepted:
        return {}
    summary = {name: float(np.mean([r.terms[name] for r in accepted])) for name in accepted[0].terms}
    summary["total"] = float(np.mean([r.total for r in accepted]))
    summary["rejected"] = float(sum(r.rejected for r in history))
    summary["steps"] = float(len(history))
    if not math.isfinite(summary["total"]):
        logger.warning("Loss summary is not finite")
    return summary
