"""Zero-click inference over all defect types and max fusion of the maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clicklabel.errors import InvalidInputError
from clicklabel.features import FeatureTensor, save_tensor
from clicklabel.images import save_png16
from clicklabel.prompts import PromptFeature
from clicklabel.refiner import RefinerParams, forward
from clicklabel.residual import ResidualTensor


@dataclass
class FusionResult:
    """Per-type score maps, their pointwise max, and the image score."""

    type_names: list[str]
    type_maps: list[np.ndarray]
    fused: np.ndarray
    image_score: float


def image_score(fused: np.ndarray) -> float:
    """Image-level anomaly score: the maximum pixel score."""
    return float(np.asarray(fused).max())


def predict_all_types(residual: ResidualTensor, prompt_features: dict[str, PromptFeature],
                      params: RefinerParams, image_hw: tuple[int, int]) -> FusionResult:
    """One zero-click seg forward per registered defect type, max-fused.

    Each type's map uses that type's averaged prompt feature; the fused
    map is the pointwise maximum over types.
    """
    if not prompt_features:
        raise InvalidInputError("no defect types registered")
    h, w = image_hw
    m_zero = np.zeros((h, w))
    names = []
    maps = []
    for name in sorted(prompt_features):
        names.append(name)
        maps.append(forward(residual, None, m_zero, prompt_features[name], params))
    fused = np.maximum.reduce(maps)
    return FusionResult(type_names=names, type_maps=maps, fused=fused,
                        image_score=image_score(fused))


def export_fused(result: FusionResult, png_path: str | Path,
                 tensor_path: str | Path | None = None) -> None:
    """Write the fused map as 16-bit grayscale PNG plus a raw f32 tensor."""
    save_png16(result.fused, png_path)
    if tensor_path is not None:
        tensor = FeatureTensor(values=result.fused[..., None].astype(np.float32),
                               source_id=Path(png_path).stem)
        save_tensor(tensor, tensor_path)
