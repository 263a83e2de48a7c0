"""
Command-line surface: ``quadrecon gen|train|render|eval|mesh``.

Every command accepts ``--config`` (KEY=VALUE file), ``--seed``, ``--out``
and repeated ``--set KEY=VALUE`` overrides. Structured errors exit with
status 1; usage errors exit with status 2.
"""

import logging
import math
from functools import wraps
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import typer
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from qr_logging import configure_logging
from quadrecon.cameras import CameraPose
from quadrecon.config import IlluminationSpec, SceneSpec, TrainConfig, config_hash, load_config, parse_overrides
from quadrecon.dataset import load_dataset
from quadrecon.errors import ConfigError, QuadreconError
from quadrecon.evaluation import evaluate, extract_mesh
from quadrecon.field import FieldNetwork
from quadrecon.illumination import SGLighting
from quadrecon.imageio import write_hdr, write_image
from quadrecon.render import render_image
from quadrecon.scenegen import generate_scene
from quadrecon.trainer import ReconstructionState, Trainer, load_checkpoint, schedule_at, summarize

logger = logging.getLogger(__name__)

app = typer.Typer(help="Joint reconstruction of shape, material and camera poses from quadrant-labeled images.")
console = Console()
err_console = Console(stderr=True)

ConfigOption = typer.Option(None, "--config", "-c", exists=True, dir_okay=False, help="KEY=VALUE configuration file")
SeedOption = typer.Option(None, "--seed", help="Random seed (overrides the config)")
SetOption = typer.Option(None, "--set", help="Config override KEY=VALUE, repeatable")
LogLevelOption = typer.Option("INFO", "--log-level", help="Root log level")
JsonLogsOption = typer.Option(False, "--json-logs", help="Emit JSON log records")


def _structured_errors(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except QuadreconError as exc:
            logger.debug(f"{type(exc).__name__} context: {exc.context}")
            err_console.print(f"[bold red]error:[/bold red] {exc}")
            raise typer.Exit(code=1)

    return wrapper


def _setup(log_level: str, json_logs: bool) -> None:
    load_dotenv()
    configure_logging(level=log_level, json_logging=json_logs)


def _resolve_config(config: Optional[Path], seed: Optional[int], sets: Optional[List[str]], **explicit) -> TrainConfig:
    overrides = parse_overrides(sets or [])
    if seed is not None:
        overrides["seed"] = seed
    overrides.update({k: v for k, v in explicit.items() if v is not None})
    resolved = load_config(config, overrides)
    logger.info(f"Configuration {config_hash(resolved)[:12]} (seed {resolved.seed})")
    return resolved


def _data_dir(data: Optional[Path], config: TrainConfig) -> Path:
    if data is not None:
        return data
    if config.data_dir:
        return Path(config.data_dir)
    raise ConfigError("no dataset given: pass DATA or set data_dir in the config")


def _state(checkpoint: Optional[Path], config: TrainConfig, dataset=None) -> ReconstructionState:
    if checkpoint is not None:
        return ReconstructionState.from_checkpoint(load_checkpoint(checkpoint))
    if dataset is None:
        raise ConfigError("an untrained reconstruction needs a dataset")
    logger.warning("No checkpoint given, using an untrained reconstruction")
    return ReconstructionState.from_dataset(config, dataset, dataset.split(config)[1])


def _parse_color(text: Optional[str]) -> Optional[Tuple[float, float, float]]:
    if text is None:
        return None
    values = [float(v) for v in text.replace(",", " ").split()]
    if len(values) == 1:
        values *= 3
    if len(values) != 3 or not all(0.0 <= v <= 1.0 for v in values):
        raise typer.BadParameter(f"expected one or three values in [0, 1], got {text!r}")
    return tuple(values)


# ---------------------------------------------------------------- gen


@app.command()
@_structured_errors
def gen(
    out: Path = typer.Option(Path("scene"), "--out", "-o", help="Dataset directory to write"),
    views: int = typer.Option(24, "--views", help="Number of views"),
    scene: Optional[Path] = typer.Option(None, "--scene", exists=True, dir_okay=False, help="Scene description JSON"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    sets: Optional[List[str]] = SetOption,
    log_level: str = LogLevelOption,
    json_logs: bool = JsonLogsOption,
):
    """Render a synthetic dataset with ground-truth poses, masks and illumination."""
    _setup(log_level, json_logs)
    resolved = _resolve_config(config, seed, None)
    spec = SceneSpec.read(scene) if scene is not None else SceneSpec()
    overrides = parse_overrides(sets or [])
    if overrides:
        try:
            spec = SceneSpec.model_validate({**spec.model_dump(), **overrides})
        except ValueError as exc:
            raise ConfigError(f"invalid scene override: {exc}") from exc
    generated = generate_scene(spec, views, resolved.seed, out)
    console.print(f"Wrote {len(generated.names)} views to [bold]{generated.root}[/bold]")


# ---------------------------------------------------------------- train


@app.command()
@_structured_errors
def train(
    data: Optional[Path] = typer.Argument(None, exists=True, file_okay=False, help="Dataset directory"),
    out: Path = typer.Option(Path("run"), "--out", "-o", help="Run directory"),
    steps: Optional[int] = typer.Option(None, "--steps", help="Total training steps"),
    resume: Optional[Path] = typer.Option(None, "--resume", exists=True, dir_okay=False, help="Checkpoint to resume"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    sets: Optional[List[str]] = SetOption,
    log_level: str = LogLevelOption,
    json_logs: bool = JsonLogsOption,
):
    """Optimize field, materials, illumination and cameras; then fit held-out views."""
    _setup(log_level, json_logs)
    resolved = _resolve_config(config, seed, sets, total_steps=steps)
    dataset = load_dataset(_data_dir(data, resolved))
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.resume(resume, dataset, out)
    else:
        trainer = Trainer(resolved, dataset, out)
    trainer.train()
    if trainer.holdout_ids and trainer.config.holdout_steps:
        trainer.holdout()
    trainer.export(out)

    table = Table(title=f"Training summary ({trainer.step} steps)")
    table.add_column("term")
    table.add_column("mean (last 50)", justify="right")
    for name, value in summarize(trainer.history).items():
        table.add_row(name, f"{value:.6g}")
    console.print(table)
    console.print(f"Run written to [bold]{out}[/bold]")


# ---------------------------------------------------------------- render


def turntable_poses(state: ReconstructionState, count: int) -> List[CameraPose]:
    """``count`` cameras on a circle at the mean radius and elevation of the recovered cameras."""
    eyes = np.stack([state.pose(i).eye().data for i in range(len(state))])
    radius = float(np.mean(np.linalg.norm(eyes, axis=1)))
    elevation = float(np.mean(np.arcsin(np.clip(eyes[:, 1] / np.linalg.norm(eyes, axis=1), -1.0, 1.0))))
    focal = float(np.mean([state.pose(i).focal.data[0] for i in range(len(state))]))
    width, height = state.sizes[0]
    poses = []
    for k in range(count):
        azimuth = 2.0 * math.pi * k / count
        eye = radius * np.array(
            [math.cos(elevation) * math.sin(azimuth), math.sin(elevation), math.cos(elevation) * math.cos(azimuth)]
        )
        poses.append(CameraPose(eye, width, height, focal))
    return poses


@app.command()
@_structured_errors
def render(
    checkpoint: Path = typer.Argument(..., exists=True, dir_okay=False, help="Trained checkpoint"),
    out: Path = typer.Option(Path("renders"), "--out", "-o", help="Output directory"),
    view: Optional[List[str]] = typer.Option(None, "--view", help="View name, repeatable (default: all views)"),
    illum: Optional[Path] = typer.Option(None, "--illum", exists=True, dir_okay=False, help="Illumination JSON to relight with"),
    basecolor: Optional[str] = typer.Option(None, "--basecolor", help="Override basecolor 'r,g,b'"),
    metallic: Optional[float] = typer.Option(None, "--metallic", min=0.0, max=1.0, help="Override metallic"),
    roughness: Optional[float] = typer.Option(None, "--roughness", min=0.02, max=1.0, help="Override roughness"),
    turntable: int = typer.Option(0, "--turntable", min=0, help="Render N turntable views instead of the dataset views"),
    hdr: bool = typer.Option(False, "--hdr", help="Also dump linear float32 images"),
    samples: Optional[int] = typer.Option(None, "--samples", min=2, help="Samples per ray"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    sets: Optional[List[str]] = SetOption,
    log_level: str = LogLevelOption,
    json_logs: bool = JsonLogsOption,
):
    """Render recovered views, a turntable, relit or material-edited variants."""
    _setup(log_level, json_logs)
    state = ReconstructionState.from_checkpoint(load_checkpoint(checkpoint))
    cfg = state.config
    if seed is not None or sets:
        logger.info("Render ignores --seed/--set; the checkpoint configuration is used")
    final = schedule_at(cfg.total_steps, cfg)
    state.field.set_annealing(final.alpha_grid, final.alpha_fourier)
    relight = SGLighting.from_spec(IlluminationSpec.read(illum)) if illum is not None else None
    material = {"basecolor": _parse_color(basecolor), "metallic": metallic, "roughness": roughness}
    material = material if any(v is not None for v in material.values()) else None
    # material edits only show in the shaded branch
    lambda_b = 0.0 if (relight is not None or material is not None) else final.lambda_b
    n_samples = samples or cfg.n_samples

    jobs = []
    if turntable:
        lighting = relight or state.lighting(0)
        jobs = [(f"turntable_{k:03d}", pose, None, lighting) for k, pose in enumerate(turntable_poses(state, turntable))]
    else:
        names = view or state.names
        for name in names:
            i = state.index_of(name)
            jobs.append((name, state.pose(i), i, relight or state.lighting(i)))

    out.mkdir(parents=True, exist_ok=True)
    for name, pose, index, lighting in jobs:
        frame = render_image(
            state.field,
            pose,
            lighting,
            index,
            (pose.width, pose.height),
            lambda_b,
            n_samples,
            material=material,
            energy_cap=cfg.shading_energy_cap,
        )
        write_image(out / f"{name}.png", frame["rgb"])
        if hdr:
            write_hdr(out / f"{name}.rgb.f32", frame["rgb"])
            write_hdr(out / f"{name}.alpha.f32", frame["alpha"])
            write_hdr(out / f"{name}.depth.f32", frame["depth"])
        logger.info(f"Rendered {name}")
    console.print(f"Rendered {len(jobs)} images to [bold]{out}[/bold]")


# ---------------------------------------------------------------- eval


@app.command("eval")
@_structured_errors
def eval_(
    data: Optional[Path] = typer.Argument(None, exists=True, file_okay=False, help="Dataset directory"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", exists=True, dir_okay=False, help="Trained checkpoint"),
    holdout_steps: Optional[int] = typer.Option(None, "--holdout-steps", min=0, help="Hold-out fitting steps"),
    out: Path = typer.Option(Path("eval"), "--out", "-o", help="Directory for eval.csv"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    sets: Optional[List[str]] = SetOption,
    log_level: str = LogLevelOption,
    json_logs: bool = JsonLogsOption,
):
    """PSNR/SSIM on held-out views and Procrustes pose errors."""
    _setup(log_level, json_logs)
    resolved = _resolve_config(config, seed, sets)
    dataset = load_dataset(_data_dir(data, resolved))
    state = _state(checkpoint, resolved, dataset)
    trainer = Trainer(state.config, dataset, state=state)
    steps = trainer.config.holdout_steps if holdout_steps is None else holdout_steps
    if trainer.holdout_ids and steps:
        trainer.holdout(steps)
    report = evaluate(trainer)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    report.print(console)


# ---------------------------------------------------------------- mesh


@app.command()
@_structured_errors
def mesh(
    checkpoint: Optional[Path] = typer.Argument(None, exists=True, dir_okay=False, help="Trained checkpoint"),
    resolution: int = typer.Option(128, "--resolution", min=16, help="Marching cubes lattice size"),
    threshold: float = typer.Option(10.0, "--threshold", help="Density level of the surface"),
    out: Path = typer.Option(Path("mesh.ply"), "--out", "-o", help="PLY file to write"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    sets: Optional[List[str]] = SetOption,
    log_level: str = LogLevelOption,
    json_logs: bool = JsonLogsOption,
):
    """Extract a triangle mesh with per-vertex normals and BRDF attributes."""
    _setup(log_level, json_logs)
    if checkpoint is not None:
        state = ReconstructionState.from_checkpoint(load_checkpoint(checkpoint))
        field_net, cfg = state.field, state.config
    else:
        cfg = _resolve_config(config, seed, sets)
        logger.warning("No checkpoint given, meshing an untrained field")
        field_net = FieldNetwork(cfg, 1, np.random.default_rng([cfg.seed, 1]))
    final = schedule_at(cfg.total_steps, cfg)
    field_net.set_annealing(final.alpha_grid, final.alpha_fourier)
    result = extract_mesh(field_net, resolution, threshold)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.write_ply(out)
    console.print(f"Mesh: {len(result.vertices)} vertices, {len(result.triangles)} triangles -> [bold]{out}[/bold]")


if __name__ == "__main__":
    app()
