"""Structured exceptions raised across the engine.

Every error carries a ``context`` dict with the values behind the message.
"""

from typing import Any, Dict, Optional


class QuadreconError(Exception):
    """Root of every error raised by quadrecon."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.context: Dict[str, Any] = dict(context or {})


class ShapeError(QuadreconError):
    def __init__(self, op: str, detail: str):
        super().__init__(f"shape mismatch in op '{op}': {detail}", {"op": op})
        self.op = op


class NonFiniteError(QuadreconError):
    def __init__(self, op: str):
        super().__init__(f"op '{op}' produced a non-finite value", {"op": op})
        self.op = op


class UnsupportedSecondOrderError(QuadreconError):
    def __init__(self, op: str):
        super().__init__(f"unsupported second-order op '{op}'", {"op": op})
        self.op = op


class SeedShapeError(QuadreconError):
    pass


class DegeneratePoseError(QuadreconError):
    pass


class PixelBoundsError(QuadreconError):
    pass


class ProcrustesError(QuadreconError):
    pass


class CheckpointError(QuadreconError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointSectionError(CheckpointError):
    pass


class DatasetError(QuadreconError):
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message if path is None else f"{message}: {path}", {"path": path})
        self.path = path


class SceneSpecError(QuadreconError):
    pass


class NoSurfaceError(QuadreconError):
    pass


class MetricsError(QuadreconError):
    pass


class ConfigError(QuadreconError):
    pass
