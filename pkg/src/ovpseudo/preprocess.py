"""Crops fed to the MLLM: soft mask (grayscale + blur), hard mask, raw box.

Images are ``(height, width, 3)`` uint8 arrays in blue-green-red order.
Masks are :class:`~ovpseudo.annotations.InstanceMask` rasters in full-image
coordinates.
"""

from __future__ import annotations

import io
import math
from enum import Enum
from pathlib import Path

import numpy as np

from .annotations import BBox, InstanceMask
from .io import atomic_write_bytes
from .kernels import convolve_rows

DEFAULT_KSIZE = 31
DEFAULT_SIGMA = 0.0
# sigma <= 0 means "derive from the kernel size": scale * ((ksize - 1) / 2 - 1) + offset
AUTO_SIGMA_SCALE = 0.3
AUTO_SIGMA_OFFSET = 0.8

GRAY_WEIGHTS_BGR = (0.114, 0.587, 0.299)


class Mode(str, Enum):
    SOFT = "soft"
    HARD = "hard"
    RAW = "raw"


class BlurScope(str, Enum):
    FRAME = "frame"  # transform the whole image, then crop
    CROP = "crop"  # crop first, transform inside the crop


class BoxOutOfBoundsError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    return img


def _round_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def grayscale(img: np.ndarray) -> np.ndarray:
    img = check_image(img).astype(np.float64)
    b, g, r = GRAY_WEIGHTS_BGR
    gray = _round_u8(b * img[..., 0] + g * img[..., 1] + r * img[..., 2])
    return np.repeat(gray[..., None], 3, axis=2)


def auto_sigma(ksize: int, scale: float = AUTO_SIGMA_SCALE, offset: float = AUTO_SIGMA_OFFSET) -> float:
    return scale * ((ksize - 1) * 0.5 - 1) + offset


def gaussian_kernel(ksize: int, sigma: float) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {ksize}")
    if sigma <= 0:
        sigma = auto_sigma(ksize)
    x = np.arange(ksize, dtype=np.float64) - (ksize - 1) / 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_planes(planes: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Blur a (c, H, W) float stack: along rows, then along columns."""
    c, h, w = planes.shape
    horiz = convolve_rows(planes.reshape(c * h, w), kernel).reshape(c, h, w)
    vert = convolve_rows(horiz.transpose(0, 2, 1).reshape(c * w, h), kernel)
    return vert.reshape(c, w, h).transpose(0, 2, 1)


def gaussian_blur(img: np.ndarray, ksize: int = DEFAULT_KSIZE, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Separable Gaussian blur with reflect-101 borders."""
    img = check_image(img)
    kernel = gaussian_kernel(ksize, sigma)
    if ksize == 1:
        return img.copy()
    if np.array_equal(img[..., 0], img[..., 1]) and np.array_equal(img[..., 0], img[..., 2]):
        plane = _blur_planes(img[None, ..., 0].astype(np.float64), kernel)[0]
        return np.repeat(_round_u8(plane)[..., None], 3, axis=2)
    planes = img.transpose(2, 0, 1).astype(np.float64)
    return _round_u8(_blur_planes(planes, kernel)).transpose(1, 2, 0).copy()


def gray_blur(img: np.ndarray, ksize: int = DEFAULT_KSIZE, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """The soft-mask background: grayscale first, then blur."""
    return gaussian_blur(grayscale(img), ksize, sigma)


def box_slices(box: BBox, height: int, width: int) -> tuple[slice, slice]:
    x0, y0 = math.floor(box.x), math.floor(box.y)
    x1, y1 = math.ceil(box.x1), math.ceil(box.y1)
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height or x1 <= x0 or y1 <= y0:
        raise BoxOutOfBoundsError(f"box {box.to_list()} outside {width}x{height} image")
    return slice(y0, y1), slice(x0, x1)


def _mask_bits(mask: InstanceMask, img: np.ndarray) -> np.ndarray:
    if mask.bits.shape != img.shape[:2]:
        raise ValueError(f"mask {mask.bits.shape} not aligned with image {img.shape[:2]}")
    return mask.bits


def raw_box_crop(img: np.ndarray, box: BBox) -> np.ndarray:
    img = check_image(img)
    ys, xs = box_slices(box, *img.shape[:2])
    return img[ys, xs].copy()


def hard_mask_crop(img: np.ndarray, box: BBox, mask: InstanceMask) -> np.ndarray:
    img = check_image(img)
    ys, xs = box_slices(box, *img.shape[:2])
    keep = _mask_bits(mask, img)[ys, xs]
    return np.where(keep[..., None], img[ys, xs], np.uint8(0))


def soft_mask_crop(
    img: np.ndarray,
    box: BBox,
    mask: InstanceMask,
    ksize: int = DEFAULT_KSIZE,
    sigma: float = DEFAULT_SIGMA,
    scope: BlurScope | str = BlurScope.FRAME,
    background: np.ndarray | None = None,
) -> np.ndarray:
    """Mask pixels verbatim, the rest of the box grayscaled and blurred.

    ``background`` may carry a precomputed full-frame :func:`gray_blur` so
    several proposals on one image share a single blur.
    """
    img = check_image(img)
    ys, xs = box_slices(box, *img.shape[:2])
    keep = _mask_bits(mask, img)[ys, xs]
    crop = img[ys, xs]
    if BlurScope(scope) is BlurScope.FRAME:
        if background is None:
            background = gray_blur(img, ksize, sigma)
        soft = background[ys, xs]
    else:
        soft = gray_blur(np.ascontiguousarray(crop), ksize, sigma)
    return np.where(keep[..., None], crop, soft)


def make_crop(img, box, mask, mode: Mode | str = Mode.SOFT, ksize=DEFAULT_KSIZE,
              sigma=DEFAULT_SIGMA, scope=BlurScope.FRAME, background=None) -> np.ndarray:
    mode = Mode(mode)
    if mode is Mode.SOFT:
        return soft_mask_crop(img, box, mask, ksize, sigma, scope, background)
    if mode is Mode.HARD:
        return hard_mask_crop(img, box, mask)
    return raw_box_crop(img, box)


# ---------------------------------------------------------------------------
# file I/O


def read_image(path) -> np.ndarray:
    """Decode a PNG or binary PPM into a BGR buffer."""
    from PIL import Image

    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(rgb[..., ::-1])


def encode_png(img: np.ndarray) -> bytes:
    from PIL import Image

    rgb = np.ascontiguousarray(check_image(img)[..., ::-1])
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, img: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_png(img))
