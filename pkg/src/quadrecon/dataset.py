"""
Datasets on disk.

A dataset directory holds::

    manifest.txt        one record per view: image mask width height pose_ref quadrant
    quadrants.txt       optional sidecar, "name L|R A|B F|K" per line, overrides the manifest labels
    poses_gt.txt        optional ground-truth poses, "# pose_ref" + three rows of [R | eye]
    poses_init.txt      optional perturbed initial poses in the same block format
    illumination/       optional per-view oracle illumination JSON files
    images/, masks/     PNG files referenced by the manifest

Lines of ``manifest.txt`` starting with ``#`` are comments.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from quadrecon.cameras import QuadrantLabel, read_pose_blocks, read_quadrants
from quadrecon.config import IlluminationSpec, ManifestRecord, TrainConfig
from quadrecon.errors import ConfigError, DatasetError
from quadrecon.imageio import read_image, read_mask, resize_image

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
QUADRANTS = "quadrants.txt"
GT_POSES = "poses_gt.txt"
INIT_POSES = "poses_init.txt"
ILLUMINATION_DIR = "illumination"


@dataclass
class ViewData:
    index: int
    name: str
    image: np.ndarray  # linear RGB (h, w, 3)
    mask: np.ndarray  # binary (h, w)
    quadrant: QuadrantLabel
    gt_pose: Optional[np.ndarray] = None
    init_pose: Optional[np.ndarray] = None
    illumination: Optional[IlluminationSpec] = None
    _pyramid: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def long_side(self) -> int:
        return max(self.width, self.height)

    def size_at(self, long_side: int) -> Tuple[int, int]:
        scale = min(long_side, self.long_side) / self.long_side
        return max(1, int(round(self.width * scale))), max(1, int(round(self.height * scale)))

    def at_resolution(self, long_side: int) -> Tuple[np.ndarray, np.ndarray]:
        """Masked target image (black background) and binary mask at ``long_side``."""
        size = self.size_at(long_side)
        if size not in self._pyramid:
            image = resize_image(self.image, size)
            mask = (resize_image(self.mask, size) >= 0.5).astype(np.float64)
            self._pyramid[size] = (image * mask[:, :, None], mask)
        return self._pyramid[size]


@dataclass
class SceneDataset:
    root: Path
    views: List[ViewData]

    def __len__(self) -> int:
        return len(self.views)

    @property
    def names(self) -> List[str]:
        return [view.name for view in self.views]

    @property
    def has_gt_poses(self) -> bool:
        return all(view.gt_pose is not None for view in self.views)

    @property
    def native_long_side(self) -> int:
        return max(view.long_side for view in self.views)

    def split(self, config: TrainConfig) -> Tuple[List[int], List[int]]:
        """Indices of training and held-out views."""
        unknown = set(config.holdout_views) - set(self.names)
        if unknown:
            raise ConfigError(f"holdout views not in dataset: {sorted(unknown)}", {"views": sorted(unknown)})
        held = {i for i, view in enumerate(self.views) if view.name in config.holdout_views}
        if config.holdout_every:
            held |= {i for i in range(len(self.views)) if i % config.holdout_every == config.holdout_every - 1}
        train = [i for i in range(len(self.views)) if i not in held]
        if not train:
            raise ConfigError("every view is held out", {"views": len(self.views)})
        return train, sorted(held)


def _read_manifest(path: Path) -> List[ManifestRecord]:
    if not path.is_file():
        raise DatasetError("manifest not found", str(path))
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            records.append(ManifestRecord.from_line(line))
        except (ValueError, ValidationError) as exc:
            raise DatasetError(f"bad manifest record on line {lineno} ({exc})", str(path)) from exc
    if not records:
        raise DatasetError("manifest lists no views", str(path))
    names = [Path(r.image).stem for r in records]
    if len(set(names)) != len(names):
        raise DatasetError("manifest lists an image more than once", str(path))
    return records


def load_dataset(root: Path) -> SceneDataset:
    """Load every view of a dataset directory; ground-truth poses are optional."""
    root = Path(root)
    records = _read_manifest(root / MANIFEST)
    quadrants = read_quadrants(root / QUADRANTS) if (root / QUADRANTS).is_file() else {}
    gt_poses = read_pose_blocks(root / GT_POSES) if (root / GT_POSES).is_file() else {}
    init_poses = read_pose_blocks(root / INIT_POSES) if (root / INIT_POSES).is_file() else {}

    views = []
    for index, record in enumerate(records):
        name = Path(record.image).stem
        image = read_image(root / record.image)
        mask = read_mask(root / record.mask)
        if image.shape[:2] != (record.height, record.width):
            raise DatasetError(
                f"image is {image.shape[1]}x{image.shape[0]}, manifest says {record.width}x{record.height}",
                str(root / record.image),
            )
        if mask.shape != image.shape[:2]:
            raise DatasetError(f"mask is {mask.shape[1]}x{mask.shape[0]}, image is {record.width}x{record.height}", str(root / record.mask))
        gt_pose = None
        if record.pose_ref is not None:
            if record.pose_ref not in gt_poses:
                raise DatasetError(f"pose reference {record.pose_ref!r} missing", str(root / GT_POSES))
            gt_pose = gt_poses[record.pose_ref]
        illum_path = root / ILLUMINATION_DIR / f"{name}.json"
        views.append(
            ViewData(
                index=index,
                name=name,
                image=image,
                mask=mask,
                quadrant=quadrants.get(name, QuadrantLabel.parse(record.quadrant)),
                gt_pose=gt_pose,
                init_pose=init_poses.get(record.pose_ref or name),
                illumination=IlluminationSpec.read(illum_path) if illum_path.is_file() else None,
            )
        )
    dataset = SceneDataset(root=root, views=views)
    if not dataset.has_gt_poses:
        logger.info(f"Dataset {root} has no complete ground-truth poses; pose evaluation disabled")
    logger.info(f"Loaded {len(dataset)} views from {root}")
    return dataset
