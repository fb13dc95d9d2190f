"""One-shot builder of a servable demo workspace from synthetic data."""

from __future__ import annotations

import shutil
from pathlib import Path

from clicklabel.features import BackendConfig
from clicklabel.images import load_png
from clicklabel.pipeline import (
    PipelineConfig,
    bank_from_dataset,
    prepare_samples,
    prompt_features_by_defect,
)
from clicklabel.prompts import TextEmbedderConfig
from clicklabel.refiner import init_params, save_checkpoint
from clicklabel.residual import MatchConfig, save_bank
from clicklabel.synthdata import load_meta, make_dataset
from clicklabel.training import TrainConfig, config_as_dict, train_click_model
from clicklabel.workspace import Workspace

import numpy as np

DEMO_PIPELINE = PipelineConfig(
    image_size=128,
    backend=BackendConfig(kind="handcrafted", grid=32, scales=(0, 2)),
    match=MatchConfig(k=4, sigma=3.2),
    embedder=TextEmbedderConfig(kind="hashed-toy", q=32, z=12, seed=7),
    r_click=4,
)


def demo_train_config(seed: int, epochs: int) -> TrainConfig:
    return TrainConfig(
        lr=1e-2, weight_decay=0.01, ema_decay=0.95, gamma=2.0,
        strengthen_radius=5.0, max_clicks=8, epochs=epochs, seed=seed,
        r_click=4, d_e=16, d_a=8,
    )


def build_demo_workspace(out_dir: str | Path, seed: int = 42,
                         train_steps: int = 2) -> Workspace:
    """Synthesize data, build the bank, train (optionally), register all.

    ``train_steps`` is the number of training epochs; zero keeps a
    seeded untrained model, which is enough to drive the UI.
    """
    out = Path(out_dir)
    ws = Workspace(out, create=True)
    pipe = DEMO_PIPELINE

    dataset_dir = out / "dataset"
    if not (dataset_dir / "meta.json").exists():
        make_dataset(dataset_dir, seed=seed, size=pipe.image_size, n_refs=4,
                     n_train=9, n_test=4, distractors=3)
    meta = load_meta(dataset_dir)

    bank = bank_from_dataset(dataset_dir, pipe)
    save_bank(bank, out / "banks" / "references.adbk")
    ws.manifest["bank"] = "banks/references.adbk"

    prompt_feats = prompt_features_by_defect(dataset_dir, pipe)
    for defect, rel in meta["prompts"].items():
        target_rel = f"prompts/{Path(rel).name}"
        shutil.copyfile(dataset_dir / rel, out / target_rel)
        ws.register_prompts(defect, meta["object"], target_rel)

    for entry in meta["test"]:
        image_id = entry["image_id"]
        target_rel = f"images/{image_id}.png"
        shutil.copyfile(dataset_dir / entry["image"], out / target_rel)
        h, w = load_png(out / target_rel).shape[:2]
        ws.register_image(image_id, target_rel, width=w, height=h)

    cfg = demo_train_config(seed, max(train_steps, 0))
    if train_steps > 0:
        samples = prepare_samples(dataset_dir, "train", pipe, bank, prompt_feats)
        log: list = []
        params = train_click_model(samples, cfg, log=log)
        steps, last_loss = len(log), float(log[-1])
    else:
        d_f = pipe.backend.d_f
        params = init_params(np.random.default_rng(seed), d_f, cfg.d_e, cfg.d_a,
                             pipe.embedder.q, variant="click")
        steps, last_loss = 0, float("nan")
    model_rel = "models/click.adwt"
    save_checkpoint(params, out / model_rel, step=steps, loss=last_loss,
                    config={"train": config_as_dict(cfg), "pipeline": pipe.to_dict()})
    ws.manifest["model"] = model_rel
    ws.manifest["backend"] = pipe.to_dict()["backend"]
    ws.manifest["embedder"] = pipe.to_dict()["embedder"]
    ws.manifest["match"] = pipe.to_dict()["match"]
    ws.manifest["image_size"] = pipe.image_size
    ws.manifest["r_click"] = pipe.r_click
    ws.save()
    return ws
