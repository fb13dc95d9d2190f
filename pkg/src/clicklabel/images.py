"""Image loading, saving, and the shared resampling conventions.

All resampling in the package (input resize, logit upsampling) goes
through :func:`bilinear_resize`, which uses the half-pixel-center
convention: output sample ``i`` reads source coordinate
``(i + 0.5) * n_in / n_out - 0.5``, clamped to the source range.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from clicklabel.errors import InvalidInputError


def load_png(path: str | Path) -> np.ndarray:
    """Load a PNG as an (H, W, 3) uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_mask_png(path: str | Path) -> np.ndarray:
    """Load a PNG as a binary (H, W) uint8 mask; any nonzero pixel is 1."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.uint8)


def save_png(arr: np.ndarray, path: str | Path) -> None:
    """Save an (H, W) or (H, W, 3) uint8 array as PNG."""
    if arr.dtype != np.uint8:
        raise InvalidInputError("save_png expects uint8 data")
    Image.fromarray(arr).save(path, format="PNG")


def save_png16(values01: np.ndarray, path: str | Path) -> None:
    """Save an (H, W) float map in [0, 1] as 16-bit grayscale PNG.

    Probabilities are scaled by 65535 and rounded.
    """
    scaled = np.round(np.clip(values01, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(path, format="PNG")


def load_png16(path: str | Path) -> np.ndarray:
    """Load a 16-bit grayscale PNG back to a float64 map in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint16)
    return arr.astype(np.float64) / 65535.0


def to_float01(image: np.ndarray) -> np.ndarray:
    """uint8 image to float64 in [0, 1]."""
    return image.astype(np.float64) / 255.0


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w_hi = src - lo
    return lo, hi, 1.0 - w_hi, w_hi


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an (H, W) or (H, W, C) float array.

    Half-pixel centers, edge clamped. Exact identity when the output
    size equals the input size.
    """
    if out_h < 1 or out_w < 1:
        raise InvalidInputError("output size must be positive")
    h, w = arr.shape[:2]
    ylo, yhi, wy0, wy1 = _axis_weights(h, out_h)
    xlo, xhi, wx0, wx1 = _axis_weights(w, out_w)
    a = arr[np.ix_(ylo, xlo)]
    b = arr[np.ix_(ylo, xhi)]
    c = arr[np.ix_(yhi, xlo)]
    d = arr[np.ix_(yhi, xhi)]
    if arr.ndim == 3:
        wy0 = wy0[:, None, None]
        wy1 = wy1[:, None, None]
        wx0 = wx0[None, :, None]
        wx1 = wx1[None, :, None]
    else:
        wy0 = wy0[:, None]
        wy1 = wy1[:, None]
        wx0 = wx0[None, :]
        wx1 = wx1[None, :]
    return (a * wx0 + b * wx1) * wy0 + (c * wx0 + d * wx1) * wy1


def bilinear_resize_transpose(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of :func:`bilinear_resize` for an (H_out, W_out) gradient.

    Scatters each output-pixel gradient back onto the four source cells
    it interpolated from; exact transpose of the forward linear map.
    """
    out_h, out_w = grad.shape
    ylo, yhi, wy0, wy1 = _axis_weights(in_h, out_h)
    xlo, xhi, wx0, wx1 = _axis_weights(in_w, out_w)
    out = np.zeros((in_h, in_w), dtype=np.float64)
    np.add.at(out, (ylo[:, None], xlo[None, :]), grad * wy0[:, None] * wx0[None, :])
    np.add.at(out, (ylo[:, None], xhi[None, :]), grad * wy0[:, None] * wx1[None, :])
    np.add.at(out, (yhi[:, None], xlo[None, :]), grad * wy1[:, None] * wx0[None, :])
    np.add.at(out, (yhi[:, None], xhi[None, :]), grad * wy1[:, None] * wx1[None, :])
    return out


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a uint8 RGB image with the shared bilinear convention."""
    if image.shape[:2] == (out_h, out_w):
        return image.copy()
    resized = bilinear_resize(image.astype(np.float64), out_h, out_w)
    return np.clip(np.round(resized), 0, 255).astype(np.uint8)


def _check_divisible(h: int, w: int, grid_h: int, grid_w: int) -> tuple[int, int]:
    if grid_h <= 0 or grid_w <= 0 or h % grid_h or w % grid_w:
        raise InvalidInputError(
            f"map size {h}x{w} is not an integer multiple of grid {grid_h}x{grid_w}"
        )
    return h // grid_h, w // grid_w


def cell_max(arr: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Per-cell maximum of an (H, W) map onto a (grid_h, grid_w) grid."""
    ch, cw = _check_divisible(arr.shape[0], arr.shape[1], grid_h, grid_w)
    return arr.reshape(grid_h, ch, grid_w, cw).max(axis=(1, 3))


def cell_mean(arr: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Per-cell mean of an (H, W) map onto a (grid_h, grid_w) grid."""
    ch, cw = _check_divisible(arr.shape[0], arr.shape[1], grid_h, grid_w)
    return arr.reshape(grid_h, ch, grid_w, cw).mean(axis=(1, 3))
