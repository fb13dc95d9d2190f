"""Calibration run for the toy end-to-end training check.

Not part of the test suite: explores hyperparameters for the seeded
end-to-end criterion (5-click mIoU >= 0-click mIoU + 0.2, monotone
click curve) and prints the numbers to freeze.
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from clicklabel.features import BackendConfig
from clicklabel.pipeline import (
    PipelineConfig,
    averaged_prompt_features,
    bank_from_dataset,
    iis_curve,
    prepare_samples,
    prompt_features_by_defect,
)
from clicklabel.prompts import TextEmbedderConfig
from clicklabel.residual import MatchConfig
from clicklabel.synthdata import make_dataset
from clicklabel.training import TrainConfig, train_click_model

SEED = 42


def main():
    t0 = time.time()
    data_dir = Path("/tmp/calib_dataset")
    if not (data_dir / "meta.json").exists():
        make_dataset(data_dir, seed=SEED, size=128, n_refs=4, n_train=12,
                     n_test=8, clean_test=0)
    pipe = PipelineConfig(
        image_size=128,
        backend=BackendConfig(kind="handcrafted", grid=16, scales=(0, 2)),
        match=MatchConfig(k=4, sigma=3.2),
        embedder=TextEmbedderConfig(kind="hashed-toy", q=32, z=12, seed=7),
        r_click=3,
    )
    print(f"[{time.time()-t0:6.1f}s] dataset ready")
    bank = bank_from_dataset(data_dir, pipe)
    prompt_feats = prompt_features_by_defect(data_dir, pipe)
    train_samples = prepare_samples(data_dir, "train", pipe, bank, prompt_feats)
    test_samples = prepare_samples(data_dir, "test", pipe, bank, prompt_feats)
    print(f"[{time.time()-t0:6.1f}s] residuals ready "
          f"(train {len(train_samples)}, test {len(test_samples)})")

    cfg = TrainConfig(
        lr=5e-3, weight_decay=0.01, ema_decay=0.95, gamma=2.0,
        strengthen_radius=4.0, max_clicks=6, epochs=3, seed=SEED,
        r_click=3, d_e=16, d_a=8,
    )
    log = []
    params = train_click_model(train_samples, cfg, log=log)
    print(f"[{time.time()-t0:6.1f}s] trained, {len(log)} steps, "
          f"loss head {np.mean(log[:10]):.3f} tail {np.mean(log[-10:]):.3f}")

    prompt_avg = averaged_prompt_features(prompt_feats)
    curve, report = iis_curve(test_samples, params, prompt_avg, max_clicks=5,
                              r_click=3)
    for pt in curve:
        print(f"  clicks={pt.clicks}  mIoU={pt.miou:.4f}")
    print("aggregate:", {k: (round(v, 4) if v is not None else None)
                         for k, v in report["aggregate"].items()})
    gain = curve[5].miou - curve[0].miou
    mono = all(curve[i + 1].miou >= curve[i].miou - 1e-9 for i in range(1, 5))
    print(f"gain(5-0)={gain:.4f}  monotone(1..5)={mono}")
    print(f"total {time.time()-t0:.1f}s")


if __name__ == "__main__":
    main()
