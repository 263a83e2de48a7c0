"""quadrecon: neural reconstruction of shape, materials, illumination and camera poses."""

from quadrecon.errors import QuadreconError

__version__ = "0.1.0"

__all__ = ["QuadreconError", "__version__"]
