"""Glue between datasets, the feature/matching core, and training.

Every stage is configuration-driven so the CLI, the HTTP service, and
the tests assemble identical pipelines from the same dictionaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clicklabel.clicks import Click, rasterize, simulate_next_click
from clicklabel.errors import InvalidInputError
from clicklabel.features import BackendConfig, FeatureTensor, extract_features
from clicklabel.images import load_mask_png, load_png, resize_image
from clicklabel.metrics import evaluation_report, miou
from clicklabel.prompts import (
    PromptFeature,
    TextEmbedderConfig,
    average_prompt_feature,
    embed_prompt,
    load_prompt_file,
)
from clicklabel.refiner import RefinerParams, forward
from clicklabel.residual import MatchConfig, ReferenceBank, build_bank, match_residual
from clicklabel.synthdata import load_meta
from clicklabel.training import TrainSample


@dataclass(frozen=True)
class PipelineConfig:
    """The full inference-side configuration of a deployment."""

    image_size: int = 512
    backend: BackendConfig = BackendConfig()
    match: MatchConfig = MatchConfig()
    embedder: TextEmbedderConfig = TextEmbedderConfig()
    r_click: int | None = None

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "backend": {
                "kind": self.backend.kind,
                "grid": self.backend.grid,
                "scales": list(self.backend.scales),
                "d_f": self.backend.d_f,
            },
            "match": {
                "k": self.match.k,
                "sigma": self.match.sigma,
                "residual_kind": self.match.residual_kind,
            },
            "embedder": {
                "kind": self.embedder.kind,
                "q": self.embedder.q,
                "z": self.embedder.z,
                "seed": self.embedder.seed,
            },
            "r_click": self.r_click,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        backend = data.get("backend") or {}
        match = data.get("match") or {}
        embedder = data.get("embedder") or {}
        return cls(
            image_size=int(data.get("image_size", 512)),
            backend=BackendConfig(
                kind=backend.get("kind", "handcrafted"),
                grid=int(backend.get("grid", 64)),
                scales=tuple(int(s) for s in backend.get("scales", (0, 4))),
                d_f=backend.get("d_f"),
            ),
            match=MatchConfig(
                k=int(match.get("k", 50)),
                sigma=float(match.get("sigma", 3.2)),
                residual_kind=match.get("residual_kind", "difference"),
            ),
            embedder=TextEmbedderConfig(
                kind=embedder.get("kind", "hashed-toy"),
                q=int(embedder.get("q", 64)),
                z=int(embedder.get("z", 20)),
                seed=int(embedder.get("seed", 0)),
            ),
            r_click=data.get("r_click"),
        )


def prepare_image(path: str | Path, cfg: PipelineConfig) -> np.ndarray:
    """Load a PNG and resize it to the pipeline's working resolution."""
    return resize_image(load_png(path), cfg.image_size, cfg.image_size)


def features_for_image(image: np.ndarray, cfg: PipelineConfig,
                       source_id: str = "") -> FeatureTensor:
    return extract_features(image, cfg.backend, source_id=source_id)


def bank_from_dataset(dataset_dir: str | Path, cfg: PipelineConfig) -> ReferenceBank:
    """Build the reference bank from the dataset's defect-free images."""
    meta = load_meta(dataset_dir)
    root = Path(dataset_dir)
    tensors = []
    for rel in meta["refs"]:
        image = prepare_image(root / rel, cfg)
        tensors.append(features_for_image(image, cfg, source_id=Path(rel).stem))
    return build_bank(tensors)


def prompt_features_by_defect(dataset_dir: str | Path,
                              cfg: PipelineConfig) -> dict[str, list[PromptFeature]]:
    meta = load_meta(dataset_dir)
    root = Path(dataset_dir)
    out = {}
    for defect, rel in meta["prompts"].items():
        prompts = load_prompt_file(root / rel)
        if not prompts:
            raise InvalidInputError(f"prompt file for {defect!r} is empty")
        out[defect] = [embed_prompt(p, cfg.embedder) for p in prompts]
    return out


def prepare_samples(dataset_dir: str | Path, split: str, cfg: PipelineConfig,
                    bank: ReferenceBank | None = None,
                    prompt_features: dict[str, list[PromptFeature]] | None = None,
                    ) -> list[TrainSample]:
    """Residuals plus resized ground truth for every entry of a split."""
    meta = load_meta(dataset_dir)
    root = Path(dataset_dir)
    if bank is None:
        bank = bank_from_dataset(dataset_dir, cfg)
    if prompt_features is None:
        prompt_features = prompt_features_by_defect(dataset_dir, cfg)
    fallback = next(iter(prompt_features.values()))
    samples = []
    for entry in meta[split]:
        image = prepare_image(root / entry["image"], cfg)
        gt = load_mask_png(root / entry["mask"])
        if gt.shape != (cfg.image_size, cfg.image_size):
            gt = (resize_image(np.stack([gt * 255] * 3, axis=2),
                               cfg.image_size, cfg.image_size)[..., 0] >= 128).astype(np.uint8)
        tensor = features_for_image(image, cfg, source_id=entry["image_id"])
        residual = match_residual(bank, tensor, cfg.match)
        samples.append(TrainSample(
            residual=residual,
            gt=gt,
            defect=entry["defect"],
            prompt_features=prompt_features.get(entry["defect"], fallback),
            image_id=entry["image_id"],
        ))
    return samples


def averaged_prompt_features(per_defect: dict[str, list[PromptFeature]]
                             ) -> dict[str, PromptFeature]:
    return {d: average_prompt_feature(fs) for d, fs in per_defect.items()}


@dataclass
class ClickCurvePoint:
    clicks: int
    miou: float


def run_click_sequence(sample: TrainSample, params: RefinerParams,
                       v: PromptFeature, max_clicks: int,
                       r_click: int) -> tuple[list[np.ndarray], list[Click]]:
    """Simulated interactive loop: masks after 0..max_clicks clicks.

    The zero-click entry is a forward pass with empty click maps. The
    loop stops early when prediction and ground truth agree; the last
    mask is repeated so every click count has an entry.
    """
    h, w = sample.gt.shape
    masks = [forward(sample.residual, None, np.zeros((h, w)), v, params)]
    clicks: list[Click] = []
    m_prev = masks[0]
    for t in range(1, max_clicks + 1):
        nxt = simulate_next_click(m_prev, sample.gt)
        if nxt is None:
            masks.append(m_prev)
            continue
        clicks.append(nxt.with_t(t))
        maps = rasterize(clicks, h, w, r_click)
        m_prev = forward(sample.residual, maps, m_prev, v, params)
        masks.append(m_prev)
    return masks, clicks


def iis_curve(samples: list[TrainSample], params: RefinerParams,
              prompt_avg: dict[str, PromptFeature], max_clicks: int,
              r_click: int) -> tuple[list[ClickCurvePoint], dict]:
    """Mean IoU per click count plus the final-mask metric report."""
    fallback = next(iter(prompt_avg.values()))
    per_click_masks: list[list[np.ndarray]] = [[] for _ in range(max_clicks + 1)]
    final_maps = []
    gts = []
    ids = []
    for s in samples:
        v = prompt_avg.get(s.defect, fallback)
        masks, _ = run_click_sequence(s, params, v, max_clicks, r_click)
        for t in range(max_clicks + 1):
            per_click_masks[t].append(masks[t])
        final_maps.append(masks[-1])
        gts.append(s.gt)
        ids.append(s.image_id)
    curve = [
        ClickCurvePoint(clicks=t, miou=miou(per_click_masks[t], gts))
        for t in range(max_clicks + 1)
    ]
    report = evaluation_report(final_maps, gts, ids)
    return curve, report
