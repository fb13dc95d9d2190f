"""Clicks, their raster encoding, and pseudo-click simulation.

A click is a pixel coordinate with a polarity (1 anomalous, 0 clean)
and a 1-based iteration index. Clicks rasterize to one binary disc map
per polarity. Training and evaluation simulate the next click from the
largest connected error region of the current prediction, placing it at
the region's interior-most pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from clicklabel.errors import InvalidInputError

POSITIVE = 1
NEGATIVE = 0

BASE_CLICK_RADIUS = 5  # pixels at 512-pixel image height
FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def click_radius_for(height: int) -> int:
    """Disc radius scaled from the 512-pixel convention."""
    return int(round(BASE_CLICK_RADIUS * height / 512.0))


@dataclass(frozen=True)
class Click:
    x: int
    y: int
    polarity: int
    t: int = 1

    def __post_init__(self) -> None:
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise InvalidInputError(f"polarity must be 0 or 1, got {self.polarity}")

    def with_t(self, t: int) -> "Click":
        return replace(self, t=t)


@dataclass
class ClickMaps:
    """Binary rasters, one per polarity, plus the disc radius used."""

    positive: np.ndarray
    negative: np.ndarray
    radius: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.positive.shape


def rasterize(clicks: list[Click], height: int, width: int,
              radius: int | None = None) -> ClickMaps:
    """Rasterize clicks to per-polarity disc maps.

    A pixel is set iff it lies within Euclidean distance ``radius`` of
    any click of that polarity (inclusive).
    """
    if radius is None:
        radius = click_radius_for(height)
    pos = np.zeros((height, width), dtype=np.uint8)
    neg = np.zeros((height, width), dtype=np.uint8)
    r2 = radius * radius
    for c in clicks:
        if not (0 <= c.x < width and 0 <= c.y < height):
            raise InvalidInputError(f"click ({c.x}, {c.y}) outside {height}x{width} image")
        y0, y1 = max(0, c.y - radius), min(height, c.y + radius + 1)
        x0, x1 = max(0, c.x - radius), min(width, c.x + radius + 1)
        yy, xx = np.ogrid[y0:y1, x0:x1]
        disc = (yy - c.y) ** 2 + (xx - c.x) ** 2 <= r2
        target = pos if c.polarity == POSITIVE else neg
        target[y0:y1, x0:x1] |= disc.astype(np.uint8)
    return ClickMaps(positive=pos, negative=neg, radius=radius)


def _largest_component(mask: np.ndarray) -> np.ndarray | None:
    """Largest 4-connected component; ties go to the earliest label,
    which scipy assigns in row-major first-pixel order."""
    labels, count = ndimage.label(mask, structure=FOUR_CONN)
    if count == 0:
        return None
    areas = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(areas)) + 1
    return labels == best


def _interior_point(component: np.ndarray) -> tuple[int, int]:
    # image borders count as boundary: pad with zeros before the EDT
    padded = np.pad(component.astype(np.uint8), 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    dist = np.where(component, dist, -1.0)
    flat = int(np.argmax(dist))  # first occurrence = smallest (y, x)
    y, x = divmod(flat, component.shape[1])
    return x, y


def simulate_next_click(pred: np.ndarray, gt: np.ndarray,
                        threshold: float = 0.5) -> Click | None:
    """Next corrective click given a prediction and the ground truth.

    Binarizes ``pred`` at ``threshold`` (>=), finds the largest
    4-connected component among false-negative and false-positive
    regions (false negatives win area ties), and returns a click of the
    matching polarity at the argmax of the component's boundary distance
    transform (ties: smallest (y, x)). ``None`` when prediction and
    ground truth agree everywhere.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InvalidInputError("prediction and ground truth dims differ")
    binary = pred >= threshold
    fn = gt & ~binary
    fp = binary & ~gt
    fn_comp = _largest_component(fn)
    fp_comp = _largest_component(fp)
    if fn_comp is None and fp_comp is None:
        return None
    fn_area = int(fn_comp.sum()) if fn_comp is not None else 0
    fp_area = int(fp_comp.sum()) if fp_comp is not None else 0
    if fn_area >= fp_area and fn_comp is not None:
        comp, polarity = fn_comp, POSITIVE
    else:
        comp, polarity = fp_comp, NEGATIVE
    x, y = _interior_point(comp)
    return Click(x=x, y=y, polarity=polarity, t=1)


def save_click_log(clicks: list[Click], path: str | Path) -> None:
    """Write a replayable click log: one JSON object per line."""
    lines = [
        json.dumps({"t": c.t, "x": c.x, "y": c.y, "polarity": c.polarity})
        for c in clicks
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_click_log(path: str | Path) -> list[Click]:
    """Read a click log in the order recorded."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        out.append(Click(x=int(obj["x"]), y=int(obj["y"]),
                         polarity=int(obj["polarity"]), t=int(obj["t"])))
    return out
