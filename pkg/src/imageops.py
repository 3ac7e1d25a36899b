"""Image tensors and the resampling / conditioning operators shared by every module.

Images are numpy arrays shaped (..., C, H, W) holding values in [-1, 1]; any number of
leading batch axes is allowed. PNG files are 8-bit RGB.
"""
import os
from typing import Optional, Tuple

import cv2
import numpy as np

from constants import NUM_HISTOGRAM_BINS, NUM_IMAGE_CHANNELS
from errors import ShapeError
from utils import is_power_of_two

ImageTensor = np.ndarray

def check_image(img: ImageTensor, channels: Optional[int]=None) -> ImageTensor:
    if not isinstance(img, np.ndarray) or img.ndim < 3:
        raise ShapeError(f"expected an array shaped (..., C, H, W), got: {getattr(img, 'shape', type(img))}")
    if channels is not None and img.shape[-3] != channels:
        raise ShapeError(f"expected {channels} channels, got: {img.shape[-3]}")
    if not np.all(np.isfinite(img)):
        raise ShapeError("image contains non-finite values")
    return img

def spatial_shape(img: ImageTensor) -> Tuple[int, int]:
    return img.shape[-2], img.shape[-1]

def to_unit_range(img: ImageTensor) -> ImageTensor:
    return (img + 1.0) / 2.0

def from_unit_range(img: ImageTensor) -> ImageTensor:
    return img * 2.0 - 1.0

def _check_factor(r: int) -> int:
    if not is_power_of_two(r):
        raise ShapeError(f"scale factor must be a power of two, got: {r}")
    return int(r)

def downsample(img: ImageTensor, r: int) -> ImageTensor:
    """Area averaging over r x r blocks, performed as log2(r) successive 2x2 means."""
    r = _check_factor(r)
    height, width = spatial_shape(img)
    if height % r or width % r:
        raise ShapeError(f"resolution {height}x{width} not divisible by {r}")

    out: ImageTensor = img
    while r > 1:
        out = 0.25 * (out[..., 0::2, 0::2] + out[..., 1::2, 0::2] + out[..., 0::2, 1::2] + out[..., 1::2, 1::2])
        r //= 2
    return out if out is not img else img.copy()

def _interpolation_matrix(size: int, r: int, dtype: np.dtype) -> np.ndarray:
    """(size * r, size) bilinear weights on the pixel-centre lattice, extended linearly past the
    outermost centres so that linear signals are reproduced everywhere."""
    matrix: np.ndarray = np.zeros((size * r, size), dtype=np.float64)
    if size == 1:
        matrix[:, 0] = 1.0
        return matrix.astype(dtype)

    source: np.ndarray = (np.arange(size * r) + 0.5) / r - 0.5
    left: np.ndarray = np.clip(np.floor(source), 0, size - 2).astype(np.int64)
    fraction: np.ndarray = source - left
    rows: np.ndarray = np.arange(size * r)
    matrix[rows, left] = 1.0 - fraction
    matrix[rows, left + 1] = fraction
    return matrix.astype(dtype)

def upsample(img: ImageTensor, r: int) -> ImageTensor:
    r = _check_factor(r)
    if r == 1:
        return img.copy()
    height, width = spatial_shape(img)
    dtype: np.dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    rows: np.ndarray = _interpolation_matrix(height, r, dtype)
    cols: np.ndarray = _interpolation_matrix(width, r, dtype)
    return (rows @ img.astype(dtype, copy=False)) @ cols.T

def histogram_equalize(img: ImageTensor) -> ImageTensor:
    """Per-channel 256-bin equalization: each pixel maps to the fraction of pixels in its plane
    at or below its quantized level. A constant plane therefore maps to 1.0.
    """
    check_image(img)
    height, width = spatial_shape(img)
    unit: np.ndarray = np.clip(to_unit_range(img.astype(np.float64)), 0.0, 1.0)
    levels: np.ndarray = np.floor(unit * (NUM_HISTOGRAM_BINS - 1) + 0.5).astype(np.int64)

    planes: np.ndarray = levels.reshape(-1, height * width)
    offsets: np.ndarray = (np.arange(planes.shape[0]) * NUM_HISTOGRAM_BINS)[:, None]
    counts: np.ndarray = np.bincount((planes + offsets).ravel(), minlength=planes.shape[0] * NUM_HISTOGRAM_BINS)
    cdf: np.ndarray = np.cumsum(counts.reshape(-1, NUM_HISTOGRAM_BINS), axis=1) / float(height * width)

    equalized: np.ndarray = np.take_along_axis(cdf, planes, axis=1).reshape(img.shape)
    return from_unit_range(equalized).astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)

def coordinate_grid(base_height: int, base_width: int, r: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-centre row (X) and column (Y) coordinates of the r-strided grid, in base-resolution
    units, normalized so that the full base image spans [0, 2*pi]."""
    r = _check_factor(r)
    if base_height % r or base_width % r:
        raise ShapeError(f"resolution {base_height}x{base_width} not divisible by {r}")
    rows: np.ndarray = (np.arange(base_height // r, dtype=np.float64) * r + 0.5) / base_height * (2.0 * np.pi)
    cols: np.ndarray = (np.arange(base_width // r, dtype=np.float64) * r + 0.5) / base_width * (2.0 * np.pi)
    return np.meshgrid(rows, cols, indexing="ij")

def position_encoding(base_height: int, base_width: int, r: int) -> ImageTensor:
    X, Y = coordinate_grid(base_height, base_width, r)
    return np.stack([np.sin(X), np.cos(X), np.sin(Y), np.cos(Y)])

def pad_reflect(img: ImageTensor, multiple: int) -> Tuple[ImageTensor, Tuple[int, int]]:
    """Reflect-pad bottom/right so both spatial sizes are multiples of `multiple`."""
    height, width = spatial_shape(img)
    pad_h: int = (-height) % multiple
    pad_w: int = (-width) % multiple
    if pad_h == 0 and pad_w == 0:
        return img, (0, 0)
    widths = [(0, 0)] * (img.ndim - 2) + [(0, pad_h), (0, pad_w)]
    return np.pad(img, widths, mode="reflect" if min(height, width) > max(pad_h, pad_w) else "symmetric"), (pad_h, pad_w)

def crop(img: ImageTensor, height: int, width: int) -> ImageTensor:
    return img[..., :height, :width]

def load_png(path: os.PathLike, dtype: Optional[np.dtype]=np.float32) -> ImageTensor:
    raw: Optional[np.ndarray] = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"could not read image: {path}")
    if raw.dtype != np.uint8 or raw.ndim != 3 or raw.shape[2] != NUM_IMAGE_CHANNELS:
        raise ShapeError(f"expected an 8-bit RGB image, got dtype={raw.dtype} shape={raw.shape} from {path}")
    rgb: np.ndarray = raw[..., ::-1].transpose(2, 0, 1)
    return (rgb.astype(np.float64) / 127.5 - 1.0).astype(dtype)

def to_uint8(img: ImageTensor) -> np.ndarray:
    scaled: np.ndarray = np.floor((img.astype(np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)

def save_png(path: os.PathLike, img: ImageTensor) -> None:
    check_image(img, NUM_IMAGE_CHANNELS)
    if img.ndim != 3:
        raise ShapeError(f"save_png takes a single (3, H, W) image, got: {img.shape}")
    bgr: np.ndarray = np.ascontiguousarray(to_uint8(img).transpose(1, 2, 0)[..., ::-1])
    if not cv2.imwrite(os.fspath(path), bgr):
        raise IOError(f"could not write image: {path}")
