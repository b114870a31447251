"""
Image and mask primitives shared by every other module.

Images are ``(H, W, 3)`` float64 arrays with values in ``[0, 1]``; binary masks
are ``(H, W)`` bool arrays where ``True`` marks a masked pixel. PNG is the only
interchange format: images as 8-bit RGB, masks as 8-bit grayscale holding 0 or
255.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MIN_SIDE = 16
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Raised when a file is not a readable PNG."""


class UnsupportedBitDepthError(ImageFormatError):
    """Raised for PNGs that are not 8-bit RGB or RGBA."""


class DimensionMismatchError(ValueError):
    """Raised when images and masks do not share a shape."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle; ``(x, y)`` is the top-left pixel."""

    x: int
    y: int
    w: int
    h: int

    def inside(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.w > 0 and self.h > 0 and \
            self.x + self.w <= width and self.y + self.h <= height

    @property
    def slices(self):
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


def check_image(image):
    """Validate an image array and return it as float64."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < MIN_SIDE or image.shape[1] < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


def check_mask(mask, shape):
    """Validate that ``mask`` is a boolean raster matching ``shape[:2]``."""
    mask = np.asarray(mask)
    if mask.dtype != bool:
        mask = mask.astype(bool)
    if mask.shape != tuple(shape[:2]):
        raise DimensionMismatchError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    return mask


def coverage(mask):
    mask = np.asarray(mask, dtype=bool)
    return float(mask.sum()) / mask.size


def luminance(pixel):
    """Rec. 601 luma of one pixel or of every pixel of an image."""
    return np.asarray(pixel, dtype=np.float64) @ LUMA_WEIGHTS


def composite(scene, pattern, mask):
    """
    Overlay ``pattern`` on ``scene`` wherever ``mask`` is set.

    Evaluates ``(1 - M) * S + M * P`` per channel. With a binary mask this is a
    pixel selection, so out-of-range values cannot appear.
    """
    scene = check_image(scene)
    pattern = check_image(pattern)
    if scene.shape != pattern.shape:
        raise DimensionMismatchError(f"scene {scene.shape} and pattern {pattern.shape} differ")
    mask = check_mask(mask, scene.shape)
    return np.where(mask[..., None], pattern, scene)


def mask_from_rects(width, height, rects):
    """Union of rectangles as a ``(height, width)`` mask."""
    mask = np.zeros((height, width), dtype=bool)
    for rect in rects:
        if not rect.inside(width, height):
            raise ValueError(f"{rect} is outside a {width}x{height} canvas")
        mask[rect.slices] = True
    return mask


def to_bytes(image):
    """Quantize ``[0, 1]`` floats to uint8 with round-half-up."""
    return np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def _png_header(path):
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path} is not a PNG file")
    (length,) = struct.unpack(">I", head[8:12])
    if length != 13 or zlib.crc32(head[12:29]) != struct.unpack(">I", head[29:33])[0]:
        raise ImageFormatError(f"{path} has a corrupt IHDR chunk")
    return head[24], head[25]


def load_png(path):
    """
    Read an 8-bit RGB or RGBA PNG as an image in ``[0, 1]``.

    Alpha is dropped. Raises :class:`FileNotFoundError` for a missing file,
    :class:`ImageFormatError` for anything that is not a decodable PNG, and
    :class:`UnsupportedBitDepthError` for other bit depths or color types.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    bit_depth, color_type = _png_header(path)
    if bit_depth != 8 or color_type not in (2, 6):
        raise UnsupportedBitDepthError(
            f"{path}: bit depth {bit_depth}, color type {color_type}; need 8-bit RGB or RGBA")
    try:
        with PILImage.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return data.astype(np.float64) / 255.0


def save_png(image, path):
    image = check_image(image)
    path = Path(path)
    PILImage.fromarray(to_bytes(image)).save(path, format="PNG")


def save_mask_png(mask, path):
    mask = np.asarray(mask, dtype=bool)
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(Path(path), format="PNG")


def load_mask_png(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such mask: {path}")
    _png_header(path)
    try:
        with PILImage.open(path) as im:
            data = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return data >= 128


def solid(height, width, color):
    """Constant-color image."""
    out = np.empty((height, width, 3), dtype=np.float64)
    out[...] = np.asarray(color, dtype=np.float64)
    return out
