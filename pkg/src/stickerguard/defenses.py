"""
Localized defenses applied under a binary defensive mask.

Two families: remapping masked pixels to flat black/white values, and
reconstructing masked pixels from their surroundings by harmonic (Laplace)
inpainting. Both leave unmasked pixels bit-identical. Masks can be composed
sequentially (each defense acts on the previous output) or in parallel (one
defended copy per mask).
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from stickerguard.imaging import DimensionMismatchError, check_image, check_mask, luminance

DEFAULT_TAU = 0.5
DEFAULT_EPS = 1e-4
DEFAULT_MAX_ITER = 2000


@dataclass(frozen=True)
class RemapMode:
    """``variant`` is ``"white"``, ``"black"`` or ``"threshold"``."""

    variant: str
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.variant not in ("white", "black", "threshold"):
            raise ValueError(f"unknown remap variant {self.variant!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


REMAP_WHITE = RemapMode("white")
REMAP_BLACK = RemapMode("black")
REMAP_THRESHOLD = RemapMode("threshold")


@dataclass(frozen=True)
class Remap:
    mode: RemapMode = REMAP_THRESHOLD

    def __call__(self, image, mask):
        return remap(image, mask, self.mode)

    @property
    def name(self):
        return {"white": "RemapW", "black": "RemapB", "threshold": "RemapT"}[self.mode.variant]


@dataclass(frozen=True)
class Reconstruct:
    eps: float = DEFAULT_EPS
    max_iterations: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def __call__(self, image, mask):
        return reconstruct(image, mask, self.eps, self.max_iterations)

    name = "Reconst"


def remap(image, mask, mode=REMAP_THRESHOLD):
    """
    Replace masked pixels by flat colors.

    White and black modes paint every masked pixel; threshold mode paints
    pixels whose luminance exceeds ``tau`` black and the rest white.
    """
    image = check_image(image)
    mask = check_mask(mask, image.shape)
    out = image.copy()
    if mode.variant == "white":
        out[mask] = 1.0
    elif mode.variant == "black":
        out[mask] = 0.0
    else:
        bright = luminance(image) > mode.tau
        out[mask & bright] = 0.0
        out[mask & ~bright] = 1.0
    return out


@numba.njit(cache=True)
def _gauss_seidel(img, rows, cols, lo, hi, eps, max_iter, iterations):
    # The three channels are independent; relaxing them in one pass keeps
    # three dependency chains in flight. A converged channel is frozen.
    # Clamping to the known range only removes rounding drift: the exact
    # averages already lie inside it.
    height, width, _ = img.shape
    lo0, lo1, lo2 = lo[0], lo[1], lo[2]
    hi0, hi1, hi2 = hi[0], hi[1], hi[2]
    a0 = True
    a1 = True
    a2 = True
    for it in range(max_iter):
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        for p in range(rows.shape[0]):
            y = rows[p]
            x = cols[p]
            t0 = 0.0
            t1 = 0.0
            t2 = 0.0
            count = 0
            if y > 0:
                t0 += img[y - 1, x, 0]
                t1 += img[y - 1, x, 1]
                t2 += img[y - 1, x, 2]
                count += 1
            if y < height - 1:
                t0 += img[y + 1, x, 0]
                t1 += img[y + 1, x, 1]
                t2 += img[y + 1, x, 2]
                count += 1
            if x > 0:
                t0 += img[y, x - 1, 0]
                t1 += img[y, x - 1, 1]
                t2 += img[y, x - 1, 2]
                count += 1
            if x < width - 1:
                t0 += img[y, x + 1, 0]
                t1 += img[y, x + 1, 1]
                t2 += img[y, x + 1, 2]
                count += 1
            if a0:
                v = min(max(t0 / count, lo0), hi0)
                b0 = max(b0, abs(v - img[y, x, 0]))
                img[y, x, 0] = v
            if a1:
                v = min(max(t1 / count, lo1), hi1)
                b1 = max(b1, abs(v - img[y, x, 1]))
                img[y, x, 1] = v
            if a2:
                v = min(max(t2 / count, lo2), hi2)
                b2 = max(b2, abs(v - img[y, x, 2]))
                img[y, x, 2] = v
        if a0:
            iterations[0] = it + 1
            a0 = b0 >= eps
        if a1:
            iterations[1] = it + 1
            a1 = b1 >= eps
        if a2:
            iterations[2] = it + 1
            a2 = b2 >= eps
        if not (a0 or a1 or a2):
            break


def reconstruct(image, mask, eps=DEFAULT_EPS, max_iterations=DEFAULT_MAX_ITER, return_iterations=False):
    """
    Harmonic inpainting of the masked pixels, channel by channel.

    Masked pixels start at the mean of the unmasked pixels of their channel
    and are then relaxed with Gauss-Seidel sweeps in row-major order, each
    pixel becoming the mean of its in-bounds 4-neighbours. A channel stops once
    no pixel moves by ``eps`` or more in a sweep, or after ``max_iterations``.
    Values are kept inside the range of the known pixels, so a constant image
    comes back unchanged bit for bit.
    """
    image = check_image(image)
    mask = check_mask(mask, image.shape)
    if mask.all():
        raise ValueError("cannot reconstruct a fully masked image")
    out = image.copy()
    if not mask.any():
        return (out, [0, 0, 0]) if return_iterations else out
    rows, cols = np.nonzero(mask)
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    known = image[~mask]
    lo, hi = known.min(axis=0), known.max(axis=0)
    for c in range(3):
        channel = out[:, :, c]
        channel[mask] = min(max(channel[~mask].mean(), lo[c]), hi[c])
    iterations = np.zeros(3, dtype=np.int64)
    _gauss_seidel(out, rows, cols, lo, hi, float(eps), int(max_iterations), iterations)
    return (out, iterations.tolist()) if return_iterations else out


def _check_masks(image, masks):
    for m in masks:
        if np.shape(m) != image.shape[:2]:
            raise DimensionMismatchError(f"mask shape {np.shape(m)} does not match image {image.shape[:2]}")


def sequential_apply(image, masks, op):
    """Apply ``op`` once per mask, each time to the previous output."""
    image = check_image(image)
    _check_masks(image, masks)
    out = image
    for m in masks:
        out = op(out, m)
    return out


def parallel_apply(image, masks, op):
    """One independently defended copy of ``image`` per mask, in mask order."""
    image = check_image(image)
    _check_masks(image, masks)
    return [op(image, m) for m in masks]
