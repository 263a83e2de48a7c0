"""Image files: 8-bit sRGB PNGs, binary mask PNGs and raw float32 HDR dumps."""

import json
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image
from skimage.transform import resize

from quadrecon.errors import DatasetError


def srgb_to_linear(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def _open(path: Path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise DatasetError("image file not found", str(path))
    try:
        return Image.open(path)
    except OSError as exc:
        raise DatasetError(f"unreadable image ({exc})", str(path)) from exc


def read_image(path: Path) -> np.ndarray:
    """Linear RGB in [0, 1], shape (h, w, 3)."""
    with _open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(data)


def read_mask(path: Path) -> np.ndarray:
    """Mask binarized at 0.5, shape (h, w)."""
    with _open(path) as img:
        data = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return (data >= 0.5).astype(np.float64)


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: Path, linear: np.ndarray) -> None:
    Image.fromarray(_to_uint8(linear_to_srgb(linear))).save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(_to_uint8(np.asarray(mask, dtype=np.float64))).save(path)


def write_hdr(path: Path, image: np.ndarray) -> Path:
    """Little-endian float32 planes (channel-major) plus a ``.json`` header sidecar."""
    path = Path(path)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    height, width, channels = image.shape
    np.ascontiguousarray(np.moveaxis(image, -1, 0), dtype="<f4").tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(
        json.dumps({"width": width, "height": height, "channels": channels, "dtype": "<f4", "layout": "planar"}, indent=2)
    )
    return sidecar


def read_hdr(path: Path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not path.is_file() or not sidecar.is_file():
        raise DatasetError("HDR dump or its header is missing", str(path))
    header = json.loads(sidecar.read_text())
    planes = np.fromfile(path, dtype=header["dtype"])
    expected = header["channels"] * header["height"] * header["width"]
    if planes.size != expected:
        raise DatasetError(f"HDR dump holds {planes.size} values, header promises {expected}", str(path))
    planes = planes.reshape(header["channels"], header["height"], header["width"])
    return np.moveaxis(planes, 0, -1).astype(np.float64)


def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Anti-aliased bilinear resize to ``(width, height)``."""
    width, height = size
    if image.shape[1] == width and image.shape[0] == height:
        return image
    return resize(image, (height, width) + image.shape[2:], order=1, anti_aliasing=True, mode="edge")
