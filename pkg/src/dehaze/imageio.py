"""PNG / PPM / PGM reading and writing, plus RGB-D ingestion.

Images live in memory as float arrays in [0, 1] shaped (1, C, H, W); 8-bit
quantization happens only here.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .haze_model import Scene

SUPPORTED = (".png", ".ppm", ".pgm", ".pnm")


class ImageFormatError(ValueError):
    pass


def _check_ext(path: Path) -> None:
    if path.suffix.lower() not in SUPPORTED:
        raise ImageFormatError(f"{path}: unsupported format (use PNG, PPM or PGM)")


def _open(path) -> Image.Image:
    path = Path(path)
    _check_ext(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    return img


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """8-bit RGB or grayscale image as a (1, C, H, W) float64 array in [0, 1]."""
    img = _open(path)
    if img.mode not in ("RGB", "L"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None, None]
    return arr.transpose(2, 0, 1)[None]


def write_image(path, image: np.ndarray) -> None:
    """Write a (1, C, H, W) / (C, H, W) / (H, W) image in [0, 1] as 8-bit."""
    path = Path(path)
    _check_ext(path)
    arr = np.asarray(image)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(to_uint8(arr)).save(path)


def write_image16(path, plane: np.ndarray) -> None:
    """Single-channel [0, 1] map as a 16-bit grayscale PNG/PGM."""
    path = Path(path)
    _check_ext(path)
    arr = np.asarray(plane).reshape(np.asarray(plane).shape[-2:])
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 65535).astype(np.uint16)).save(path)


def read_image16(path) -> np.ndarray:
    """Raw 16-bit grayscale values as a (H, W) float64 array."""
    img = _open(path)
    if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise ImageFormatError(f"{path}: expected a 16-bit grayscale image, got mode {img.mode}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.min() < 0 or arr.max() > 65535:
        raise ImageFormatError(f"{path}: values outside the 16-bit range")
    return arr


def load_rgbd(image_path, depth_path) -> Scene:
    """RGB image plus 16-bit depth map, depth scaled so its maximum is 1."""
    clear = read_image(image_path)
    if clear.shape[1] == 1:
        clear = np.repeat(clear, 3, axis=1)
    depth = read_image16(depth_path)
    if depth.shape != clear.shape[2:]:
        raise ImageFormatError(f"depth {depth.shape} does not match image {clear.shape[2:]}")
    peak = depth.max()
    depth = depth / peak if peak > 0 else depth
    return Scene(clear, depth[None, None])
