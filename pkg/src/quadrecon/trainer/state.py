"""
Everything a reconstruction consists of: the field, per-view illumination
and per-view camera multiplexes, plus their mapping to checkpoint sections.
"""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from quadrecon.autodiff import Tensor
from quadrecon.cameras import CameraPose, Multiplex, quadrant_init, spawn_multiplex
from quadrecon.config import TrainConfig, config_hash
from quadrecon.dataset import SceneDataset, ViewData
from quadrecon.errors import CheckpointError, DatasetError
from quadrecon.field import FieldNetwork
from quadrecon.illumination import Illumination, SGLighting
from quadrecon.trainer.checkpoint import Checkpoint, parameter_checksum

logger = logging.getLogger(__name__)

_POSE_TENSORS = ("delta_eye", "delta_dir", "roll", "focal")


def initial_pose(view: ViewData, config: TrainConfig, seed: int) -> CameraPose:
    if config.pose_init == "gt":
        if view.gt_pose is None:
            raise DatasetError(f"pose_init=gt but view {view.name} has no ground-truth pose")
        return CameraPose.from_matrix(view.gt_pose, view.width, view.height)
    if config.pose_init == "perturbed":
        if view.init_pose is None:
            raise DatasetError(f"pose_init=perturbed but view {view.name} has no initial pose")
        return CameraPose.from_matrix(view.init_pose, view.width, view.height)
    return quadrant_init(view.quadrant, config.camera_radius, seed, view.width, view.height, config.quadrant_jitter_deg)


class ReconstructionState:
    def __init__(
        self,
        config: TrainConfig,
        names: Sequence[str],
        sizes: Sequence[Tuple[int, int]],
        multiplexes: Sequence[Multiplex],
    ):
        self.config = config
        self.names = list(names)
        self.sizes = [tuple(s) for s in sizes]
        self.field = FieldNetwork(config, len(self.names), np.random.default_rng([config.seed, 1]))
        light_rng = np.random.default_rng([config.seed, 2])
        self.lights = [Illumination(config.sg_lobes, light_rng) for _ in self.names]
        self.multiplexes = list(multiplexes)
        # every member ever spawned, by uid; faded members stay here with frozen tensors
        self.members: List[Dict[int, CameraPose]] = [dict(zip(m.uids, m.members)) for m in self.multiplexes]

    @classmethod
    def from_dataset(cls, config: TrainConfig, dataset: SceneDataset, holdout: Sequence[int] = ()) -> "ReconstructionState":
        multiplexes = []
        for view in dataset.views:
            seed = config.seed * 1000 + view.index
            pose = initial_pose(view, config, seed)
            size = 1 if view.index in holdout else config.multiplex_size
            multiplexes.append(spawn_multiplex(pose, size, config.multiplex_jitter, seed))
        return cls(config, dataset.names, [(v.width, v.height) for v in dataset.views], multiplexes)

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown view {name!r}") from None

    def pose(self, index: int) -> CameraPose:
        return self.multiplexes[index].best

    def lighting(self, index: int) -> SGLighting:
        return self.lights[index].lighting()

    # ------------------------------------------------------------ parameter groups

    def grid_parameters(self) -> List[Tensor]:
        return list(self.field.encoder.grid.tables)

    def network_parameters(self, brdf: bool = True) -> List[Tensor]:
        grid = {id(t) for t in self.grid_parameters()}
        frozen = set() if brdf else {id(t) for t in self.field.brdf_parameters()}
        return [p for p in self.field.parameters() if id(p) not in grid and id(p) not in frozen]

    def illumination_parameters(self, indices: Optional[Sequence[int]] = None) -> List[Tensor]:
        indices = range(len(self)) if indices is None else indices
        return [p for i in indices for p in self.lights[i].parameters()]

    def camera_parameters(self) -> List[Tensor]:
        return [p for members in self.members for uid in sorted(members) for p in members[uid].parameters()]

    def field_checksum(self) -> str:
        return parameter_checksum((name, p.data) for name, p in self.field.named_parameters())

    def poses(self) -> Dict[str, np.ndarray]:
        return {name: self.pose(i).matrix() for i, name in enumerate(self.names)}

    # ------------------------------------------------------------ checkpoint sections

    def write_sections(self, checkpoint: Checkpoint) -> None:
        checkpoint.add("config", meta={"config": self.config.model_dump(mode="json"), "hash": config_hash(self.config)})
        checkpoint.add("views", meta={"names": self.names, "sizes": [list(s) for s in self.sizes]})
        field_tensors = dict(self.field.state_dict())
        field_tensors["fourier_offsets"] = self.field.encoder.fourier.offsets
        checkpoint.add("field", field_tensors, meta={"grid_levels": self.field.encoder.grid.level_headers()})
        checkpoint.add(
            "illumination",
            {f"{i}.{name}": p.data for i, light in enumerate(self.lights) for name, p in light.named_parameters()},
        )
        tensors, multiplex = {}, {}
        for i, members in enumerate(self.members):
            for uid, pose in members.items():
                prefix = f"{i}.{uid}"
                tensors[f"{prefix}.eye0"] = pose.eye0
                tensors[f"{prefix}.center"] = pose.center
                for attr in _POSE_TENSORS:
                    tensors[f"{prefix}.{attr}"] = getattr(pose, attr).data
            mux = self.multiplexes[i]
            multiplex[self.names[i]] = {"all": sorted(members), "alive": list(mux.uids), "smoothed": list(mux.smoothed)}
        checkpoint.add("cameras", tensors, meta={"multiplex": multiplex})

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "ReconstructionState":
        config = TrainConfig.model_validate(checkpoint.section("config").meta["config"])
        views = checkpoint.section("views").meta
        names, sizes = views["names"], views["sizes"]

        cameras = checkpoint.section("cameras")
        all_members, multiplexes = [], []
        for i, name in enumerate(names):
            info = cameras.meta["multiplex"][name]
            members = {}
            for uid in info["all"]:
                prefix = f"{i}.{uid}"
                pose = CameraPose(
                    cameras.tensors[f"{prefix}.eye0"], sizes[i][0], sizes[i][1], center=cameras.tensors[f"{prefix}.center"]
                )
                for attr in _POSE_TENSORS:
                    getattr(pose, attr).data[...] = cameras.tensors[f"{prefix}.{attr}"]
                members[uid] = pose
            all_members.append(members)
            alive = [members[uid] for uid in info["alive"]]
            multiplexes.append(Multiplex(members=alive, uids=list(info["alive"]), smoothed=list(info["smoothed"])))

        state = cls(config, names, sizes, multiplexes)
        state.members = all_members

        field_section = checkpoint.section("field")
        tensors = dict(field_section.tensors)
        offsets = tensors.pop("fourier_offsets")
        try:
            state.field.load_state_dict(tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"field tensors do not match the configuration: {exc}") from exc
        state.field.encoder.fourier.offsets = offsets.copy()
        illumination = checkpoint.section("illumination").tensors
        for i, light in enumerate(state.lights):
            for name, p in light.named_parameters():
                p.data[...] = illumination[f"{i}.{name}"]
        logger.debug(f"Restored reconstruction of {len(names)} views")
        return state

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        yield from ((f"field.{n}", p) for n, p in self.field.named_parameters())
        for i, light in enumerate(self.lights):
            yield from ((f"light.{i}.{n}", p) for n, p in light.named_parameters())
        for i, members in enumerate(self.members):
            for uid in sorted(members):
                yield from ((f"camera.{i}.{uid}.{n}", p) for n, p in members[uid].named_parameters())
