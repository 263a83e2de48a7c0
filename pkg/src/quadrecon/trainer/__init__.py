from .checkpoint import Checkpoint, load_checkpoint, parameter_checksum, save_checkpoint
from .loop import CHECKPOINT_NAME, METRICS_NAME, POSES_NAME, HoldoutResult, Trainer, summarize
from .optim import Adam, ParamGroup, build_optimizer
from .schedule import ScheduleState, schedule_at
from .state import ReconstructionState, initial_pose

__all__ = [
    "CHECKPOINT_NAME",
    "METRICS_NAME",
    "POSES_NAME",
    "Adam",
    "Checkpoint",
    "HoldoutResult",
    "ParamGroup",
    "ReconstructionState",
    "ScheduleState",
    "Trainer",
    "build_optimizer",
    "initial_pose",
    "load_checkpoint",
    "parameter_checksum",
    "save_checkpoint",
    "schedule_at",
    "summarize",
]
