"""Command-line entry points for every pipeline stage.

The CLI is a thin layer: each subcommand parses arguments, calls the
library, and reports. ``serve`` starts the HTTP annotation service.
Errors exit nonzero with a single-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from clicklabel import errors
from clicklabel.clicks import load_click_log
from clicklabel.features import BackendConfig, load_tensor, save_tensor

from clicklabel.images import load_mask_png, load_png, load_png16, save_png
from clicklabel.metrics import evaluation_report
from clicklabel.pipeline import (
    PipelineConfig,
    averaged_prompt_features,
    bank_from_dataset,
    features_for_image,
    iis_curve,
    prepare_image,
    prepare_samples,
    prompt_features_by_defect,
)
from clicklabel.prompts import (
    TextEmbedderConfig,
    average_prompt_feature,
    embed_prompt,
    load_prompt_file,
    prompt_file_name,
)
from clicklabel.refiner import (
    load_checkpoint_config,
    load_params,
    save_checkpoint,
)
from clicklabel.residual import MatchConfig, load_bank, match_residual, save_bank
from clicklabel.session import RefineContext, export_mask, replay
from clicklabel.synthdata import make_dataset
from clicklabel.training import (
    config_as_dict,
    load_train_config,
    train_click_model,
    train_seg_model,
)
from clicklabel.workspace import Workspace


def mask_digest(mask: np.ndarray) -> str:
    """Canonical hash of a binary label image: sha256 of raw uint8 bytes."""
    return hashlib.sha256(np.ascontiguousarray(mask, dtype=np.uint8).tobytes()).hexdigest()


def _pipeline_from_args(args) -> PipelineConfig:
    scales = tuple(int(s) for s in str(args.scales).split(",") if s != "")
    return PipelineConfig(
        image_size=args.size,
        backend=BackendConfig(kind="handcrafted", grid=args.grid, scales=scales),
        match=MatchConfig(k=args.k, sigma=args.sigma),
        embedder=TextEmbedderConfig(kind="hashed-toy", q=args.embed_q,
                                    z=args.embed_z, seed=args.embed_seed),
        r_click=args.r_click,
    )


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=int, default=512, help="working image size")
    p.add_argument("--grid", type=int, default=64, help="feature grid side")
    p.add_argument("--scales", default="0,4", help="comma list of window radii")
    p.add_argument("--k", type=int, default=50, help="global neighbor count")
    p.add_argument("--sigma", type=float, default=3.2, help="spatial match radius")
    p.add_argument("--embed-q", type=int, default=64, dest="embed_q")
    p.add_argument("--embed-z", type=int, default=20, dest="embed_z")
    p.add_argument("--embed-seed", type=int, default=0, dest="embed_seed")
    p.add_argument("--r-click", type=int, default=None, dest="r_click")


def cmd_extract(args) -> int:
    pipe = _pipeline_from_args(args)
    src = Path(args.input)
    paths = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not paths:
        raise errors.InvalidInputError(f"no PNG images under {src}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in paths:
        image = prepare_image(path, pipe)
        tensor = features_for_image(image, pipe, source_id=path.stem)
        save_tensor(tensor, out_dir / f"{path.stem}.adft")
    print(f"extracted {len(paths)} tensor(s) into {out_dir}")
    return 0


def cmd_bank_build(args) -> int:
    feature_dir = Path(args.features)
    files = sorted(feature_dir.glob("*.adft"))
    if not files:
        raise errors.InvalidInputError(f"no .adft files under {feature_dir}")
    tensors = [load_tensor(f) for f in files]
    globals_dir = args.global_features
    global_tensors = None
    if globals_dir:
        global_tensors = [load_tensor(Path(globals_dir) / f.name) for f in files]
    from clicklabel.residual import build_bank

    bank = build_bank(tensors, global_tensors)
    save_bank(bank, args.out)
    print(f"bank with {bank.n_images} image(s), {bank.n_features} features -> {args.out}")
    return 0


def cmd_prompts_import(args) -> int:
    ws = Workspace(args.workspace, create=True)
    prompts = load_prompt_file(args.file)
    if not prompts:
        raise errors.InvalidInputError(f"no prompts in {args.file}")
    rel = f"prompts/{prompt_file_name(args.object, args.defect)}"
    target = ws.path(rel)
    target.write_text("\n".join(prompts) + "\n", encoding="utf-8")
    ws.register_prompts(args.defect, args.object, rel)
    ws.save()
    print(f"imported {len(prompts)} prompt(s) for defect {args.defect!r}")
    return 0


def _load_dataset_bundle(dataset_dir: str, pipe: PipelineConfig):
    bank = bank_from_dataset(dataset_dir, pipe)
    prompt_feats = prompt_features_by_defect(dataset_dir, pipe)
    return bank, prompt_feats


def cmd_train(args) -> int:
    cfg, sections = load_train_config(args.config, overrides={"seed": args.seed})
    data_section = sections.get("data", {})
    dataset_dir = args.dataset or data_section.get("dir")
    if not dataset_dir:
        raise errors.InvalidInputError("no dataset: pass --dataset or [data] dir")
    pipe = _pipeline_section(sections, cfg)
    bank, prompt_feats = _load_dataset_bundle(dataset_dir, pipe)
    samples = prepare_samples(dataset_dir, "train", pipe, bank, prompt_feats)
    log: list = []
    if args.variant == "click":
        params = train_click_model(samples, cfg, log=log)
    else:
        click_model_path = args.click_model or sections.get("seg", {}).get("click_model")
        if not click_model_path:
            raise errors.InvalidInputError("seg training needs --click-model")
        click_params = load_params(click_model_path)
        params = train_seg_model(samples, click_params, cfg, log=log)
    out = args.out or f"{args.variant}.adwt"
    save_checkpoint(
        params, out, step=len(log), loss=float(log[-1]) if log else float("nan"),
        config={"train": config_as_dict(cfg), "pipeline": pipe.to_dict()},
    )
    print(f"trained {args.variant} model: {len(log)} steps -> {out}")
    return 0


def _pipeline_section(sections: dict, cfg) -> PipelineConfig:
    pipe_section = sections.get("pipeline", {})
    scales = tuple(int(s) for s in pipe_section.get("scales", "0,4").split(","))
    return PipelineConfig(
        image_size=int(pipe_section.get("image_size", 512)),
        backend=BackendConfig(kind="handcrafted",
                              grid=int(pipe_section.get("grid", 64)),
                              scales=scales),
        match=MatchConfig(k=int(pipe_section.get("k", 50)),
                          sigma=float(pipe_section.get("sigma", 3.2))),
        embedder=TextEmbedderConfig(kind="hashed-toy",
                                    q=int(pipe_section.get("embed_q", 64)),
                                    z=int(pipe_section.get("embed_z", 20)),
                                    seed=int(pipe_section.get("embed_seed", 0))),
        r_click=cfg.r_click,
    )


def _pipeline_from_checkpoint(model_path: str) -> PipelineConfig:
    sidecar = load_checkpoint_config(model_path)
    return PipelineConfig.from_dict(sidecar["config"]["pipeline"])


def cmd_simulate(args) -> int:
    params = load_params(args.model)
    pipe = _pipeline_from_checkpoint(args.model)
    if args.replay:
        return _simulate_replay(args, params, pipe)
    bank, prompt_feats = _load_dataset_bundle(args.dataset, pipe)
    samples = prepare_samples(args.dataset, "test", pipe, bank, prompt_feats)
    prompt_avg = averaged_prompt_features(prompt_feats)
    r_click = pipe.r_click or max(1, round(5 * pipe.image_size / 512))
    curve, report = iis_curve(samples, params, prompt_avg, args.clicks, r_click)
    report["click_curve"] = [{"clicks": p.clicks, "miou": p.miou} for p in curve]
    Path(args.report).write_text(json.dumps(report, indent=2), encoding="utf-8")
    agg = report["aggregate"]
    print("clicks->miou: " + " ".join(f"{p.clicks}:{p.miou:.4f}" for p in curve))
    print(f"ap={agg['ap']} pro={agg['pro']} pixel_auroc={agg['pixel_auroc']} "
          f"image_auroc={agg['image_auroc']} miou={agg['miou']}")
    return 0


def _simulate_replay(args, params, pipe: PipelineConfig) -> int:
    if not (args.image and args.bank):
        raise errors.InvalidInputError("--replay needs --image and --bank")
    bank = load_bank(args.bank)
    image = prepare_image(args.image, pipe)
    tensor = features_for_image(image, pipe, source_id=Path(args.image).stem)
    residual = match_residual(bank, tensor, pipe.match)
    if args.prompts:
        feats = [embed_prompt(p, pipe.embedder) for p in load_prompt_file(args.prompts)]
        v = average_prompt_feature(feats)
    else:
        v = embed_prompt(args.defect or "defect", pipe.embedder)
    clicks = load_click_log(args.replay)
    r_click = pipe.r_click or max(1, round(5 * pipe.image_size / 512))
    ctx = RefineContext(params=params, residual=residual, prompt_feature=v,
                        height=pipe.image_size, width=pipe.image_size,
                        r_click=r_click, model_id=Path(args.model).stem)
    session = replay(clicks, ctx, image_id=Path(args.image).stem)
    label = export_mask(session)
    if args.out:
        save_png(label, args.out)
    print(mask_digest(label))
    return 0


def cmd_eval(args) -> int:
    score_dir = Path(args.scores)
    gt_dir = Path(args.gt)
    score_files = sorted(list(score_dir.glob("*.adft")) + list(score_dir.glob("*.png")))
    if not score_files:
        raise errors.InvalidInputError(f"no score maps under {score_dir}")
    maps, gts, ids = [], [], []
    for f in score_files:
        gt_path = gt_dir / f"{f.stem}.png"
        if not gt_path.exists():
            raise errors.InvalidInputError(f"missing ground truth for {f.stem}")
        if f.suffix == ".adft":
            maps.append(load_tensor(f).values[..., 0].astype(np.float64))
        else:
            maps.append(load_png16(f))
        gts.append(load_mask_png(gt_path))
        ids.append(f.stem)
    report = evaluation_report(maps, gts, ids)
    Path(args.report).write_text(json.dumps(report, indent=2), encoding="utf-8")
    if args.csv:
        lines = ["id,anomalous,image_score,iou,pro"]
        for e in report["per_image"]:
            pro_cell = "" if e["pro"] is None else f"{e['pro']:.6f}"
            lines.append(f"{e['id']},{int(e['anomalous'])},{e['image_score']:.6f},"
                         f"{e['iou']:.6f},{pro_cell}")
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    agg = report["aggregate"]
    print(f"ap={agg['ap']} pro={agg['pro']} pixel_auroc={agg['pixel_auroc']} "
          f"image_auroc={agg['image_auroc']} miou={agg['miou']}")
    return 0


def cmd_synth(args) -> int:
    meta = make_dataset(
        args.out, seed=args.seed, size=args.size, n_refs=args.refs,
        n_train=args.train, n_test=args.test, clean_test=args.clean_test,
        contrast=(args.contrast_lo, args.contrast_hi), distractors=args.distractors,
    )
    print(f"dataset with {len(meta['train'])} train / {len(meta['test'])} test "
          f"images -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from clicklabel.service.app import create_app

    app = create_app(args.workspace)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_demo(args) -> int:
    from clicklabel.demo import build_demo_workspace

    build_demo_workspace(args.out, seed=args.seed, train_steps=args.train_steps)
    print(f"demo workspace ready at {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clicklabel",
        description="Click-guided anomaly labeling pipeline and service",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract feature tensors from images")
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory for .adft files")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_extract)

    bank = sub.add_parser("bank", help="reference bank operations")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)
    p = bank_sub.add_parser("build", help="build a bank from feature tensors")
    p.add_argument("--features", required=True, help="directory of .adft files")
    p.add_argument("--out", required=True, help="output .adbk path")
    p.add_argument("--global-features", dest="global_features", default=None,
                   help="optional directory of tensors for global descriptors")
    p.set_defaults(func=cmd_bank_build)

    prompts = sub.add_parser("prompts", help="prompt file operations")
    prompts_sub = prompts.add_subparsers(dest="prompts_command", required=True)
    p = prompts_sub.add_parser("import", help="import a prompt text file")
    p.add_argument("--file", required=True)
    p.add_argument("--defect", required=True)
    p.add_argument("--object", required=True)
    p.add_argument("--workspace", default="workspace")
    p.set_defaults(func=cmd_prompts_import)

    p = sub.add_parser("train", help="train the click or seg model")
    p.add_argument("--variant", choices=("click", "seg"), required=True)
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--dataset", default=None, help="override [data] dir")
    p.add_argument("--click-model", dest="click_model", default=None,
                   help="click checkpoint (seg variant)")
    p.add_argument("--out", default=None, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="pseudo-click evaluation or log replay")
    p.add_argument("--model", required=True, help=".adwt checkpoint")
    p.add_argument("--dataset", default=None, help="dataset directory")
    p.add_argument("--clicks", type=int, default=5)
    p.add_argument("--report", default="simulate_report.json")
    p.add_argument("--replay", default=None, help="click log to replay")
    p.add_argument("--image", default=None, help="image for --replay")
    p.add_argument("--bank", default=None, help="bank for --replay")
    p.add_argument("--prompts", default=None, help="prompt file for --replay")
    p.add_argument("--defect", default=None, help="defect name for --replay")
    p.add_argument("--out", default=None, help="mask PNG output for --replay")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="score maps against ground truth")
    p.add_argument("--scores", required=True, help="directory of .adft/.png maps")
    p.add_argument("--gt", required=True, help="directory of ground-truth PNGs")
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--csv", default=None, help="optional CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--train", type=int, default=12)
    p.add_argument("--test", type=int, default=6)
    p.add_argument("--clean-test", dest="clean_test", type=int, default=0)
    p.add_argument("--distractors", type=int, default=3)
    p.add_argument("--contrast-lo", dest="contrast_lo", type=float, default=0.1)
    p.add_argument("--contrast-hi", dest="contrast_hi", type=float, default=0.28)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="start the annotation HTTP service")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--workspace", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("demo", help="build a ready-to-serve demo workspace")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--train-steps", dest="train_steps", type=int, default=2,
                   help="training epochs for the demo model (0 = untrained)")
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except errors.ClickLabelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
