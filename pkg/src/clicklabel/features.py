"""Feature backend: per-image descriptor grids and their binary format.

The handcrafted backend computes, for every grid cell and every
configured scale, the per-channel mean, per-channel standard deviation,
and a magnitude-weighted 8-bin gradient-orientation histogram over the
cell's receptive window. It is a deterministic, learning-free stand-in
for a CNN feature extractor; precomputed tensors can be imported through
the same file format instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from clicklabel.errors import FormatError, InvalidInputError
from clicklabel.images import to_float01

ADFT_MAGIC = b"ADFT"
ADFT_VERSION = 1

HIST_BINS = 8
FEATURES_PER_SCALE = 3 + 3 + HIST_BINS  # channel means, channel stds, orientation bins


@dataclass(frozen=True)
class BackendConfig:
    """Configuration of the feature extractor.

    ``kind`` is "handcrafted" or "imported". ``grid`` is the square
    feature-grid side (h_f = w_f). ``scales`` are receptive-window radii
    in pixels around each cell, used by the handcrafted backend only.
    """

    kind: str = "handcrafted"
    grid: int = 64
    scales: tuple[int, ...] = (0, 4)
    d_f: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("handcrafted", "imported"):
            raise InvalidInputError(f"unknown backend kind {self.kind!r}")
        if self.grid < 1:
            raise InvalidInputError("grid must be >= 1")
        if self.kind == "handcrafted":
            if not self.scales:
                raise InvalidInputError("handcrafted backend needs at least one scale")
            expected = FEATURES_PER_SCALE * len(self.scales)
            if self.d_f is not None and self.d_f != expected:
                raise InvalidInputError(
                    f"d_f {self.d_f} does not match handcrafted output {expected}"
                )
            object.__setattr__(self, "d_f", expected)
        elif self.d_f is None:
            raise InvalidInputError("imported backend requires explicit d_f")


@dataclass
class FeatureTensor:
    """An (h_f, w_f, d_f) grid of descriptors for one image."""

    values: np.ndarray
    source_id: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise InvalidInputError("feature tensor must be 3-dimensional")
        if not np.isfinite(self.values).all():
            raise InvalidInputError("feature tensor contains non-finite values")

    @property
    def h_f(self) -> int:
        return self.values.shape[0]

    @property
    def w_f(self) -> int:
        return self.values.shape[1]

    @property
    def d_f(self) -> int:
        return self.values.shape[2]


def _cell_bounds(n_pixels: int, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    edges = (np.arange(n_cells + 1) * n_pixels) // n_cells
    return edges[:-1], edges[1:]


def _prefix_sum2d(arr: np.ndarray) -> np.ndarray:
    # (H, W, C) -> (H+1, W+1, C) inclusion-exclusion table
    out = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1) + arr.shape[2:], dtype=np.float64)
    out[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    return out


def _window_sums(table: np.ndarray, y0: np.ndarray, y1: np.ndarray,
                 x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    # table is a prefix-sum array; bounds are per-cell start/end vectors
    return (
        table[np.ix_(y1, x1)]
        - table[np.ix_(y0, x1)]
        - table[np.ix_(y1, x0)]
        + table[np.ix_(y0, x0)]
    )


def _gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # central differences with replicated edges
    padded = np.pad(gray, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return gx, gy


def extract_features(image: np.ndarray, cfg: BackendConfig, source_id: str = "") -> FeatureTensor:
    """Compute the handcrafted descriptor grid for one RGB image.

    Pixel values are normalized to [0, 1]. For each cell and scale
    radius ``r``, the window is the cell's pixel block expanded by ``r``
    on every side and clipped to the image. Per-scale layout is
    ``[mean_r, mean_g, mean_b, std_r, std_g, std_b, hist_0..7]``; scales
    are concatenated in configuration order. The orientation histogram
    bins ``atan2(gy, gx)`` into 8 equal sectors of [-pi, pi), weights by
    gradient magnitude, and normalizes by the window's total magnitude
    (all-zero when the window has no gradient energy). Deterministic:
    a pure function of (pixels, cfg).
    """
    if cfg.kind != "handcrafted":
        raise InvalidInputError("extract_features requires the handcrafted backend")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError("image must be (H, W, 3)")
    h, w = image.shape[:2]
    g = cfg.grid
    if h < g or w < g:
        raise InvalidInputError(f"image {h}x{w} smaller than one {g}x{g} grid cell")

    img = to_float01(image)
    # center per channel so constant regions sum to exactly zero in the
    # prefix tables; window means/stds are then bit-stable across cells
    ch_mean = img.reshape(-1, 3).mean(axis=0)
    centered = img - ch_mean
    gray = img.mean(axis=2)
    gx, gy = _gradients(gray)
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx)
    bins = np.floor((theta + np.pi) / (2.0 * np.pi / HIST_BINS)).astype(np.int64)
    np.clip(bins, 0, HIST_BINS - 1, out=bins)
    hist_planes = np.zeros((h, w, HIST_BINS), dtype=np.float64)
    rows, cols = np.indices((h, w))
    hist_planes[rows, cols, bins] = mag

    sum_t = _prefix_sum2d(centered)
    sq_t = _prefix_sum2d(centered * centered)
    hist_t = _prefix_sum2d(hist_planes)

    y0c, y1c = _cell_bounds(h, g)
    x0c, x1c = _cell_bounds(w, g)

    parts = []
    for r in cfg.scales:
        y0 = np.maximum(y0c - r, 0)
        y1 = np.minimum(y1c + r, h)
        x0 = np.maximum(x0c - r, 0)
        x1 = np.minimum(x1c + r, w)
        area = ((y1 - y0)[:, None] * (x1 - x0)[None, :]).astype(np.float64)[..., None]
        s = _window_sums(sum_t, y0, y1, x0, x1)
        sq = _window_sums(sq_t, y0, y1, x0, x1)
        mean_c = s / area
        mean = mean_c + ch_mean
        var = np.maximum(sq / area - mean_c * mean_c, 0.0)
        std = np.sqrt(var)
        hist = _window_sums(hist_t, y0, y1, x0, x1)
        total = hist.sum(axis=2, keepdims=True)
        hist = np.divide(hist, total, out=np.zeros_like(hist), where=total > 0)
        parts.extend([mean, std, hist])
    values = np.concatenate(parts, axis=2).astype(np.float32)
    return FeatureTensor(values=values, source_id=source_id)


def global_descriptor(t: FeatureTensor) -> np.ndarray:
    """Spatial mean of all cell descriptors, scaled to unit length.

    The all-zero tensor maps to the zero vector.
    """
    mean = t.values.astype(np.float64).reshape(-1, t.d_f).mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return mean
    return mean / norm


def save_tensor(t: FeatureTensor, path: str | Path) -> None:
    """Write a feature tensor in the ADFT binary format."""
    payload = t.values.astype("<f4").tobytes(order="C")
    header = ADFT_MAGIC + struct.pack("<IIII", ADFT_VERSION, t.h_f, t.w_f, t.d_f)
    Path(path).write_bytes(header + payload)


def load_tensor(path: str | Path) -> FeatureTensor:
    """Read an ADFT file; raises FormatError naming the offending field."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError("truncated header")
    if raw[:4] != ADFT_MAGIC:
        raise FormatError("bad magic")
    version, h_f, w_f, d_f = struct.unpack("<IIII", raw[4:20])
    if version != ADFT_VERSION:
        raise FormatError(f"version {version} unsupported")
    if h_f < 1 or w_f < 1 or d_f < 1:
        raise FormatError("dimensions must be positive")
    expected = h_f * w_f * d_f * 4
    if len(raw) - 20 != expected:
        raise FormatError(
            f"payload size {len(raw) - 20} does not match {h_f}x{w_f}x{d_f} floats"
        )
    values = np.frombuffer(raw[20:], dtype="<f4").reshape(h_f, w_f, d_f)
    return FeatureTensor(values=values.copy(), source_id=Path(path).stem)
