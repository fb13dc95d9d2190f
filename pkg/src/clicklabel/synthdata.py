"""Seeded procedural defect images for toy-scale training and tests.

Backgrounds are band-limited noise textures; defects are blobs with
wobbled radii, convex polygons, or thick scratch segments, filled with a
contrasting texture. The ground-truth mask is the exact defect support.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from clicklabel.errors import InvalidInputError
from clicklabel.images import save_png

DEFECT_FAMILIES = ("blob", "polygon", "scratch")

MIN_AREA_FRACTION = 0.002
MAX_AREA_FRACTION = 0.2


def _band_noise(rng: np.random.Generator, size: int, smooth: float) -> np.ndarray:
    noise = rng.normal(size=(size, size))
    smoothed = ndimage.gaussian_filter(noise, smooth, mode="wrap")
    lo, hi = smoothed.min(), smoothed.max()
    if hi - lo < 1e-12:
        return np.zeros_like(smoothed)
    return (smoothed - lo) / (hi - lo)


def _blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    cx = rng.uniform(0.2, 0.8) * size
    cy = rng.uniform(0.2, 0.8) * size
    base_r = rng.uniform(0.05, 0.13) * size
    k = int(rng.integers(2, 5))
    phase = rng.uniform(0, 2 * np.pi)
    wobble = rng.uniform(0.1, 0.35)
    yy, xx = np.indices((size, size))
    theta = np.arctan2(yy - cy, xx - cx)
    radius = base_r * (1.0 + wobble * np.sin(k * theta + phase))
    return np.hypot(yy - cy, xx - cx) <= radius


def _polygon_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    cx = rng.uniform(0.25, 0.75) * size
    cy = rng.uniform(0.25, 0.75) * size
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.06, 0.15, size=n) * size
    px = cx + radii * np.cos(angles)
    py = cy + radii * np.sin(angles)
    yy, xx = np.indices((size, size))
    inside = np.ones((size, size), dtype=bool)
    for i in range(n):
        x0, y0 = px[i], py[i]
        x1, y1 = px[(i + 1) % n], py[(i + 1) % n]
        # vertices are in CCW angular order; keep the left half-plane
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def _scratch_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    x0, y0 = rng.uniform(0.1, 0.9, size=2) * size
    angle = rng.uniform(0, 2 * np.pi)
    length = rng.uniform(0.25, 0.6) * size
    x1 = np.clip(x0 + length * np.cos(angle), 0, size - 1)
    y1 = np.clip(y0 + length * np.sin(angle), 0, size - 1)
    mask = np.zeros((size, size), dtype=bool)
    steps = int(np.hypot(x1 - x0, y1 - y0)) * 2 + 1
    for t in np.linspace(0.0, 1.0, steps):
        mask[int(round(y0 + (y1 - y0) * t)), int(round(x0 + (x1 - x0) * t))] = True
    thickness = int(rng.integers(1, 3))
    return ndimage.binary_dilation(mask, iterations=thickness)


_MAKERS = {"blob": _blob_mask, "polygon": _polygon_mask, "scratch": _scratch_mask}


def synth_defect(seed: int, size: int = 128, defect: str = "blob",
                 contrast: tuple[float, float] = (0.1, 0.28),
                 distractors: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (image, ground-truth mask) pair for one seed.

    The image is a textured background with 1..3 defects of the given
    family; the mask covers exactly the defect pixels and is never
    empty. Total defect area stays within documented fraction bounds.
    ``contrast`` bounds the brightness shift of the defect texture.

    ``distractors`` adds up to that many benign marks drawn from the
    same shape families and contrast range but excluded from the mask:
    they are indistinguishable from defects by local appearance, which
    is what makes click guidance informative on this data.
    """
    if size < 64:
        raise InvalidInputError("size must be >= 64")
    if defect not in _MAKERS:
        raise InvalidInputError(f"unknown defect family {defect!r}")
    rng = np.random.default_rng(seed)
    background = synth_background(rng, size)

    min_px = int(MIN_AREA_FRACTION * size * size)
    max_px = int(MAX_AREA_FRACTION * size * size)

    def sample_region(family: str, occupied: np.ndarray) -> np.ndarray | None:
        for _ in range(50):
            candidate = _MAKERS[family](rng, size)
            area = int(candidate.sum())
            if area < max(min_px // 2, 8):
                continue
            if (candidate & occupied).any():
                continue
            if int((occupied | candidate).sum()) > max_px:
                continue
            return candidate
        return None

    gt = np.zeros((size, size), dtype=bool)
    n_defects = int(rng.integers(1, 4))
    for _ in range(n_defects):
        region = sample_region(defect, gt)
        if region is not None:
            gt |= region
    if not gt.any():
        # guaranteed fallback: a centered blob of admissible area
        yy, xx = np.indices((size, size))
        r = max(int(np.sqrt(min_px / np.pi)) + 2, 4)
        gt = np.hypot(yy - size / 2, xx - size / 2) <= r

    benign = np.zeros((size, size), dtype=bool)
    if distractors > 0:
        n_benign = int(rng.integers(1, distractors + 1))
        for _ in range(n_benign):
            family = DEFECT_FAMILIES[int(rng.integers(len(DEFECT_FAMILIES)))]
            region = sample_region(family, gt | benign)
            if region is not None:
                benign |= region

    image = background.copy()
    grain = _band_noise(rng, size, smooth=0.8)
    for support in (gt, benign):
        if not support.any():
            continue
        shift = rng.uniform(*contrast) * rng.choice([-1.0, 1.0])
        tex = np.clip(0.5 + shift + 0.25 * (grain - 0.5), 0.0, 1.0)
        for ch in range(3):
            channel = image[..., ch]
            channel[support] = tex[support]
    image = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    return image, gt.astype(np.uint8)


def synth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Textured defect-free background as an (H, W, 3) float in [0, 1]."""
    coarse = _band_noise(rng, size, smooth=6.0)
    fine = _band_noise(rng, size, smooth=1.5)
    lum = 0.42 + 0.16 * coarse + 0.06 * (fine - 0.5)
    tint = rng.uniform(-0.02, 0.02, size=3)
    return np.clip(lum[..., None] + tint, 0.0, 1.0)


def synth_reference(seed: int, size: int = 128) -> np.ndarray:
    """Defect-free uint8 reference image."""
    rng = np.random.default_rng(seed)
    return np.clip(np.round(synth_background(rng, size) * 255), 0, 255).astype(np.uint8)


_PROMPT_TEMPLATES = (
    "a {d} defect on the panel surface",
    "an irregular {d} mark",
    "a small {d} flaw in the texture",
    "surface damage shaped like a {d}",
    "a contrasting {d} patch",
    "one visible {d} blemish",
    "a faint {d} imperfection",
    "a localized {d} damage region",
)


def family_prompts(defect: str) -> list[str]:
    return [t.format(d=defect) for t in _PROMPT_TEMPLATES]


@dataclass
class DatasetEntry:
    image_id: str
    image: str
    mask: str
    defect: str


def make_dataset(out_dir: str | Path, seed: int = 0, size: int = 128,
                 n_refs: int = 4, n_train: int = 12, n_test: int = 6,
                 families: tuple[str, ...] = DEFECT_FAMILIES,
                 clean_test: int = 0, obj: str = "panel",
                 contrast: tuple[float, float] = (0.1, 0.28),
                 distractors: int = 0) -> dict:
    """Write a toy dataset directory and its meta.json index.

    Layout: refs/*.png, train/images|masks/*.png, test/images|masks/*.png,
    prompts/{obj}__{family}.txt. Test seeds never overlap train seeds.
    ``clean_test`` appends defect-free test images with empty masks.
    """
    out = Path(out_dir)
    for sub in ("refs", "train/images", "train/masks", "test/images", "test/masks",
                "prompts"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    for i in range(n_refs):
        save_png(synth_reference(seed * 100_000 + 90_000 + i, size), out / "refs" / f"ref_{i:03d}.png")

    def write_split(split: str, count: int, seed_base: int) -> list[DatasetEntry]:
        entries = []
        for i in range(count):
            family = families[i % len(families)]
            image, gt = synth_defect(seed_base + i, size=size, defect=family,
                                     contrast=contrast, distractors=distractors)
            image_id = f"{split}_{family}_{i:03d}"
            img_rel = f"{split}/images/{image_id}.png"
            mask_rel = f"{split}/masks/{image_id}.png"
            save_png(image, out / img_rel)
            save_png(gt * 255, out / mask_rel)
            entries.append(DatasetEntry(image_id, img_rel, mask_rel, family))
        return entries

    train_entries = write_split("train", n_train, seed * 100_000 + 1)
    test_entries = write_split("test", n_test, seed * 100_000 + 50_000)
    for i in range(clean_test):
        image_id = f"test_clean_{i:03d}"
        img_rel = f"test/images/{image_id}.png"
        mask_rel = f"test/masks/{image_id}.png"
        save_png(synth_reference(seed * 100_000 + 70_000 + i, size), out / img_rel)
        save_png(np.zeros((size, size), dtype=np.uint8), out / mask_rel)
        test_entries.append(DatasetEntry(image_id, img_rel, mask_rel, "clean"))

    prompts = {}
    for family in families:
        rel = f"prompts/{obj}__{family}.txt"
        (out / rel).write_text("\n".join(family_prompts(family)) + "\n", encoding="utf-8")
        prompts[family] = rel

    meta = {
        "size": size,
        "object": obj,
        "families": list(families),
        "refs": [f"refs/ref_{i:03d}.png" for i in range(n_refs)],
        "prompts": prompts,
        "train": [e.__dict__ for e in train_entries],
        "test": [e.__dict__ for e in test_entries],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return meta


def load_meta(dataset_dir: str | Path) -> dict:
    meta_path = Path(dataset_dir) / "meta.json"
    if not meta_path.exists():
        raise InvalidInputError(f"dataset {dataset_dir} has no meta.json")
    return json.loads(meta_path.read_text(encoding="utf-8"))
