"""
Typed configuration for training, scenes and illumination files.

Training configuration files are plain ``KEY=VALUE`` text (parsed with
python-dotenv). Keys are case-insensitive; ``GRID_*`` and ``FOURIER_*`` keys
address the nested encoder settings, e.g. ``GRID_LEVELS=4``. A value written
as ``env:NAME`` is read from the process environment.

Example::

    TOTAL_STEPS=5000
    SEED=7
    LR_CAMERA=1.5e-3
    MULTIPLEX_SIZE=4
    GRID_TABLE_SIZE=1024
    DATA_DIR=env:QUADRECON_DATA
"""

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from quadrecon.errors import ConfigError, SceneSpecError

logger = logging.getLogger(__name__)


class HashGridSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    levels: int = Field(16, ge=1)
    table_size: int = Field(2**19, ge=2)
    features_per_level: int = Field(2, ge=1)
    base_resolution: int = Field(8, ge=2)
    max_resolution: int = Field(2048, ge=2)
    init_scale: float = Field(1e-4, ge=0.0)

    @field_validator("table_size")
    @classmethod
    def power_of_two(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError(f"table_size must be a power of two, got {v}")
        return v

    @model_validator(mode="after")
    def growth_above_one(self) -> "HashGridSettings":
        if self.levels > 1 and self.max_resolution <= self.base_resolution:
            raise ValueError("max_resolution must exceed base_resolution when levels > 1")
        return self

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(math.log(self.max_resolution / self.base_resolution) / (self.levels - 1))

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth_factor**level + 1e-9))

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


class FourierSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_frequencies: int = Field(10, ge=1)
    offset_scale: float = Field(0.5, ge=0.0)
    hidden_width: int = Field(64, ge=1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    data_dir: Optional[str] = None
    total_steps: int = Field(5000, ge=1)
    seed: int = 0

    # optimizers
    lr_network: float = Field(1e-3, gt=0)
    lr_grid: float = Field(1e-3, gt=0)
    lr_camera: float = Field(1.5e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    camera_beta1: float = Field(0.2, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    camera_lr_decay_steps: int = Field(40000, ge=1)
    camera_clip_norm: float = Field(2.5, gt=0)
    network_clip_norm: float = Field(0.1, gt=0)

    # loss weights
    lambda_xor: float = 50.0
    grid_decay_weight: float = 0.02
    multiplex_weight: float = 0.1
    lambda_ndir: float = 3e-4
    lambda_smooth: float = 1e-3
    lambda_lookat: float = 1.0
    lambda_bounds: float = 1.0
    lambda_offset: float = 0.1
    lambda_p: float = Field(0.05, gt=0, le=1)
    camera_importance_sign: Literal[1, -1] = 1
    loss_buffer_size: int = Field(1000, ge=1)
    bounds_r_min: float = Field(1.0, gt=0)
    bounds_r_max: float = Field(4.0, gt=0)

    # schedule
    anneal_end_fraction: float = 1.0 / 3.0
    ramp_end_fraction: float = 0.5
    focal_unlock_fraction: float = 0.25
    importance_start_fraction: Optional[float] = None
    resolution_start: int = Field(100, ge=4)
    resolution_end: int = Field(400, ge=4)
    random_ray_steps: int = Field(1000, ge=0)
    freeze_brdf_while_radiance: bool = True

    # sampling
    rays_per_batch: int = Field(512, ge=1)
    patches_per_step: int = Field(4, ge=1)
    patch_size: int = Field(16, ge=2)
    n_samples: int = Field(64, ge=2)
    scene_radius: float = Field(1.5, gt=0)

    # cameras
    pose_init: Literal["gt", "perturbed", "quadrant"] = "quadrant"
    multiplex_size: int = Field(4, ge=1)
    multiplex_jitter: float = Field(0.1, ge=0)
    quadrant_jitter_deg: float = Field(20.0, ge=0, lt=45)
    camera_radius: float = Field(2.2, gt=0)

    # model
    grid: HashGridSettings = Field(default_factory=HashGridSettings)
    fourier: FourierSettings = Field(default_factory=FourierSettings)
    embedding_dim: int = Field(8, ge=1)
    sg_lobes: int = Field(3, ge=1)
    shading_energy_cap: bool = False

    # ablations
    anneal_encoding: bool = True
    patch_losses: bool = True
    use_multiplex_consistency: bool = True
    importance_weighting: bool = True
    hybrid_encoding: bool = True

    # holdout
    holdout_every: int = Field(0, ge=0)
    holdout_views: List[str] = Field(default_factory=list)
    holdout_steps: int = Field(200, ge=0)

    # bookkeeping
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(0, ge=0)

    @model_validator(mode="after")
    def fractions_ordered(self) -> "TrainConfig":
        fractions = (self.focal_unlock_fraction, self.anneal_end_fraction, self.ramp_end_fraction)
        if not (0.0 < fractions[0] < fractions[1] < fractions[2] <= 1.0):
            raise ValueError(f"schedule fractions must satisfy 0 < focal < anneal < ramp <= 1, got {fractions}")
        if self.bounds_r_min >= self.bounds_r_max:
            raise ValueError("bounds_r_min must be smaller than bounds_r_max")
        if self.resolution_end < self.resolution_start:
            raise ValueError("resolution_end must be at least resolution_start")
        return self

    @property
    def importance_start(self) -> float:
        if self.importance_start_fraction is not None:
            return self.importance_start_fraction
        return self.anneal_end_fraction / 2.0


class LobeSpec(BaseModel):
    axis: Tuple[float, float, float]
    sharpness: float = Field(gt=0)
    color: Tuple[float, float, float]

    @field_validator("color")
    @classmethod
    def non_negative(cls, v):
        if min(v) < 0:
            raise ValueError("lobe color must be non-negative")
        return v

    @field_validator("axis")
    @classmethod
    def unit_axis(cls, v):
        n = math.sqrt(sum(c * c for c in v))
        if n < 1e-12:
            raise ValueError("lobe axis must be non-zero")
        return tuple(c / n for c in v)


class IlluminationSpec(BaseModel):
    ambient: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    lobes: List[LobeSpec] = Field(default_factory=list)

    @field_validator("ambient")
    @classmethod
    def non_negative(cls, v):
        if min(v) < 0:
            raise ValueError("ambient must be non-negative")
        return v

    @classmethod
    def read(cls, path: Path) -> "IlluminationSpec":
        try:
            return cls.model_validate_json(Path(path).read_text())
        except (OSError, ValidationError) as exc:
            raise ConfigError(f"cannot read illumination file {path}: {exc}", {"path": str(path)}) from exc

    def write(self, path: Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))


class PrimitiveSpec(BaseModel):
    kind: Literal["sphere", "box", "torus"]
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    # sphere: (r,), box: half extents (x, y, z), torus: (major, minor)
    size: Tuple[float, ...] = (0.5,)
    texture: Literal["checker", "noise", "solid"] = "checker"
    color_a: Tuple[float, float, float] = (0.8, 0.3, 0.2)
    color_b: Tuple[float, float, float] = (0.2, 0.6, 0.9)
    texture_scale: float = Field(4.0, gt=0)
    metallic: float = Field(0.0, ge=0, le=1)
    roughness: float = Field(0.6, ge=0.02, le=1)
    metallic_split: bool = False

    @model_validator(mode="after")
    def size_matches_kind(self) -> "PrimitiveSpec":
        expected = {"sphere": 1, "box": 3, "torus": 2}[self.kind]
        if len(self.size) != expected or min(self.size) <= 0:
            raise ValueError(f"{self.kind} needs {expected} positive size values, got {self.size}")
        return self

    def bounding_radius(self) -> float:
        c = math.sqrt(sum(v * v for v in self.center))
        if self.kind == "sphere":
            return c + self.size[0]
        if self.kind == "box":
            return c + math.sqrt(sum(v * v for v in self.size))
        return c + self.size[0] + self.size[1]


class SceneSpec(BaseModel):
    primitives: List[PrimitiveSpec] = Field(default_factory=lambda: [PrimitiveSpec(kind="sphere")])
    width: int = Field(64, ge=8)
    height: int = Field(64, ge=8)
    camera_radius: float = Field(2.2, gt=1.0)
    camera_radius_jitter: float = Field(0.1, ge=0)
    fov_deg: float = Field(53.13, gt=1, lt=170)
    light_sharpness: float = Field(40.0, gt=0)
    light_intensity: float = Field(3.0, gt=0)
    ambient: float = Field(0.15, ge=0)
    light_at_camera: bool = False
    perturb_rotation_deg: float = Field(15.0, ge=0)
    perturb_translation: float = Field(0.1, ge=0)

    def validate_bounds(self, limit: float = 1.0) -> None:
        for primitive in self.primitives:
            radius = primitive.bounding_radius()
            if radius > limit + 1e-9:
                raise SceneSpecError(
                    f"{primitive.kind} extends to radius {radius:.3f}, outside the unit bounding sphere",
                    {"kind": primitive.kind, "radius": radius},
                )

    @classmethod
    def read(cls, path: Path) -> "SceneSpec":
        try:
            return cls.model_validate_json(Path(path).read_text())
        except (OSError, ValidationError) as exc:
            raise SceneSpecError(f"cannot read scene spec {path}: {exc}", {"path": str(path)}) from exc


class ManifestRecord(BaseModel):
    """One manifest line: ``image mask width height pose_ref quadrant``."""

    image: str
    mask: str
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    pose_ref: Optional[str] = None
    quadrant: str

    @field_validator("quadrant")
    @classmethod
    def quadrant_letters(cls, v: str) -> str:
        v = v.replace(" ", "").upper()
        if len(v) != 3 or v[0] not in "LR" or v[1] not in "AB" or v[2] not in "FK":
            raise ValueError(f"quadrant label must look like 'RAF', got {v!r}")
        return v

    def to_line(self) -> str:
        return f"{self.image} {self.mask} {self.width} {self.height} {self.pose_ref or '-'} {self.quadrant}"

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"expected 6 fields, got {len(parts)}")
        image, mask, width, height, pose_ref, quadrant = parts
        return cls(
            image=image,
            mask=mask,
            width=int(width),
            height=int(height),
            pose_ref=None if pose_ref == "-" else pose_ref,
            quadrant=quadrant,
        )


def _parse_environment_variables(values: Dict[str, Any]) -> Dict[str, Any]:
    """Resolve ``env:NAME`` values from the process environment."""
    parsed = {}
    for key, value in values.items():
        if isinstance(value, str) and value.startswith("env:"):
            env_var = value.split(":", 1)[1]
            env_value = os.environ.get(env_var)
            if env_value is None:
                logger.warning(f"Environment variable {env_var} not found, keeping original value for {key}")
                parsed[key] = value
            else:
                logger.debug(f"Loaded {env_var} from environment for {key}")
                parsed[key] = env_value
        else:
            parsed[key] = value
    return parsed


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        key = key.strip().lower()
        for prefix, model in (("grid_", HashGridSettings), ("fourier_", FourierSettings)):
            sub = key[len(prefix):]
            if key.startswith(prefix) and sub in model.model_fields:
                nested.setdefault(prefix[:-1], {})[sub] = value
                break
        else:
            if key == "holdout_views" and isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            nested[key] = value
    return nested


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be KEY=VALUE, got {pair!r}", {"override": pair})
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Build a TrainConfig from an optional KEY=VALUE file plus overrides."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", {"path": str(path)})
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    values.update(overrides or {})
    values = _parse_environment_variables(values)
    try:
        return TrainConfig.model_validate(_nest(values))
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}", {"path": str(path) if path else None}) from exc


def config_hash(config: BaseModel) -> str:
    """Stable digest of a resolved configuration."""
    config_str = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(config_str.encode()).hexdigest()
