"""Image patches, PNG I/O and the RGB <-> l-alpha-beta conversion.

Patches are plain ``float64`` arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``; l-alpha-beta images have the same shape and unbounded values.
Quantisation to 8 bits only happens in :func:`save_png`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import png

# Standard colour-transfer coefficients, used unmodified.
RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LOGLMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LAB_TO_LOGLMS = np.linalg.inv(LOGLMS_TO_LAB)

LMS_FLOOR = 1e-6


class ImageError(ValueError):
    pass


class DecodeError(ImageError):
    pass


class UnsupportedFormat(ImageError):
    pass


def check_patch(img, name="image"):
    """Validate and return ``img`` as a float64 ``(H, W, 3)`` patch."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"{name}: expected shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ImageError(f"{name}: patches must be at least 2x2, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ImageError(f"{name}: non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ImageError(f"{name}: values must lie in [0, 1]")
    return img


def load_png(path):
    """Read an 8- or 16-bit RGB(A) PNG into a ``[0, 1]`` float patch; alpha is dropped."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        width, height, rows, info = png.Reader(bytes=raw).read()
        data = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    except (png.Error, ValueError, EOFError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    if info.get("greyscale") or info.get("palette"):
        raise UnsupportedFormat(f"{path}: only RGB/RGBA PNGs are supported")
    planes = info["planes"]
    if planes not in (3, 4):
        raise UnsupportedFormat(f"{path}: {planes} channels")
    data = data.reshape(height, width, planes)[..., :3]
    return check_patch(data / float(2 ** info["bitdepth"] - 1), str(path))


def save_png(img, path):
    """Write an 8-bit RGB PNG with each channel stored as ``round(v * 255)``."""
    img = check_patch(img)
    h, w, _ = img.shape
    q = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        png.Writer(w, h, greyscale=False, bitdepth=8).write(fh, q.reshape(h, w * 3))


def rgb_to_lab(img):
    """RGB -> LMS -> log10 (floored at 1e-6) -> l-alpha-beta.

    Works on any array whose last axis holds RGB triples, so batches of
    patches convert in one call.
    """
    img = np.asarray(img, dtype=np.float64)
    lms = img @ RGB_TO_LMS.T
    return np.log10(np.maximum(lms, LMS_FLOOR)) @ LOGLMS_TO_LAB.T


def lab_to_rgb(lab, clamp=True):
    """Inverse of :func:`rgb_to_lab`; clamps to ``[0, 1]`` unless ``clamp=False``."""
    lab = np.asarray(lab, dtype=np.float64)
    rgb = np.power(10.0, lab @ LAB_TO_LOGLMS.T) @ LMS_TO_RGB.T
    if clamp:
        np.clip(rgb, 0.0, 1.0, out=rgb)
    return rgb


def _bilinear_matrix(n_out, n_in):
    """Row-stochastic interpolation matrix with half-pixel centres (edge replicate)."""
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(img, height, width):
    """Bilinear resampling of ``(..., H, W, C)`` arrays to ``(..., height, width, C)``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == (height, width):
        return img.copy()
    ry = _bilinear_matrix(height, h)
    rx = _bilinear_matrix(width, w)
    return np.einsum("yh,...hwc,xw->...yxc", ry, img, rx, optimize=True)
