import json
from pathlib import Path

import numpy as np
import pytest

from clicklabel.cli import main as cli_main, mask_digest


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Dataset, bank, and a briefly trained click model, built via the CLI."""
    root = tmp_path_factory.mktemp("cli_toy")
    dataset = root / "dataset"
    assert cli_main(["synth", "--out", str(dataset), "--seed", "9", "--size", "128",
                     "--train", "3", "--test", "2", "--clean-test", "1"]) == 0
    config = root / "train.ini"
    config.write_text(
        "[train]\n"
        "lr = 0.01\nepochs = 1\nseed = 5\nmax_clicks = 3\nema_decay = 0.9\n"
        "d_e = 8\nd_a = 4\nr_click = 3\n"
        "[data]\n"
        f"dir = {dataset}\n"
        "[pipeline]\n"
        "image_size = 128\ngrid = 16\nscales = 0,2\nk = 4\nsigma = 3.2\n"
        "embed_q = 16\nembed_z = 8\nembed_seed = 7\n",
        encoding="utf-8",
    )
    model = root / "click.adwt"
    assert cli_main(["train", "--variant", "click", "--config", str(config),
                     "--out", str(model)]) == 0
    return {"root": root, "dataset": dataset, "config": config, "model": model}


def test_extract_writes_one_tensor_per_image(toy, tmp_path):
    out = tmp_path / "feats"
    code = cli_main(["extract", "--in", str(toy["dataset"] / "refs"),
                     "--out", str(out), "--size", "128", "--grid", "16",
                     "--scales", "0,2"])
    assert code == 0
    files = sorted(out.glob("*.adft"))
    assert len(files) == len(list((toy["dataset"] / "refs").glob("*.png")))


def test_bank_build(toy, tmp_path):
    feats = tmp_path / "feats"
    cli_main(["extract", "--in", str(toy["dataset"] / "refs"), "--out", str(feats),
              "--size", "128", "--grid", "16", "--scales", "0,2"])
    bank = tmp_path / "bank.adbk"
    assert cli_main(["bank", "build", "--features", str(feats),
                     "--out", str(bank)]) == 0
    assert bank.exists()


def test_prompts_import(toy, tmp_path):
    ws = tmp_path / "ws"
    prompt_file = tmp_path / "raw.txt"
    prompt_file.write_text("a greasy smudge\n# bad line\nanother smudge\n")
    code = cli_main(["prompts", "import", "--file", str(prompt_file),
                     "--defect", "smudge", "--object", "panel",
                     "--workspace", str(ws)])
    assert code == 0
    stored = ws / "prompts" / "panel__smudge.txt"
    assert stored.read_text().splitlines() == ["a greasy smudge", "another smudge"]
    manifest = json.loads((ws / "manifest.json").read_text())
    assert manifest["prompts"]["smudge"]["object"] == "panel"


def test_train_writes_checkpoint_and_sidecar(toy):
    sidecar = json.loads(Path(str(toy["model"]) + ".json").read_text())
    assert {"step", "loss", "config_hash", "config"} <= set(sidecar)
    assert sidecar["config"]["pipeline"]["backend"]["grid"] == 16


def test_simulate_writes_report(toy, tmp_path):
    report = tmp_path / "sim.json"
    code = cli_main(["simulate", "--model", str(toy["model"]),
                     "--dataset", str(toy["dataset"]), "--clicks", "2",
                     "--report", str(report)])
    assert code == 0
    data = json.loads(report.read_text())
    assert {"per_image", "aggregate", "click_curve"} <= set(data)
    assert len(data["click_curve"]) == 3  # 0, 1, 2 clicks
    assert set(data["aggregate"]) == {"ap", "pro", "pixel_auroc", "image_auroc", "miou"}


def test_replay_reproduces_mask_hash(toy, tmp_path):
    import numpy as np

    from clicklabel.clicks import Click, save_click_log
    from clicklabel.pipeline import (PipelineConfig, bank_from_dataset,
                                     features_for_image, prepare_image)
    from clicklabel.prompts import average_prompt_feature, embed_prompt, load_prompt_file
    from clicklabel.refiner import load_params
    from clicklabel.residual import match_residual, save_bank
    from clicklabel.session import RefineContext, export_mask, replay

    sidecar = json.loads(Path(str(toy["model"]) + ".json").read_text())
    pipe = PipelineConfig.from_dict(sidecar["config"]["pipeline"])
    bank = bank_from_dataset(toy["dataset"], pipe)
    bank_path = tmp_path / "bank.adbk"
    save_bank(bank, bank_path)
    meta = json.loads((toy["dataset"] / "meta.json").read_text())
    image_rel = meta["test"][0]["image"]
    image_path = toy["dataset"] / image_rel
    prompts_path = toy["dataset"] / meta["prompts"][meta["test"][0]["defect"]]

    clicks = [Click(30, 30, 1, 1), Click(80, 85, 0, 2), Click(50, 42, 1, 3)]
    log_path = tmp_path / "clicks.jsonl"
    save_click_log(clicks, log_path)

    # archive hash from an in-process session
    image = prepare_image(image_path, pipe)
    tensor = features_for_image(image, pipe)
    residual = match_residual(bank, tensor, pipe.match)
    feats = [embed_prompt(p, pipe.embedder) for p in load_prompt_file(prompts_path)]
    ctx = RefineContext(params=load_params(toy["model"]), residual=residual,
                        prompt_feature=average_prompt_feature(feats),
                        height=128, width=128, r_click=pipe.r_click or 1)
    session = replay(clicks, ctx)
    archived = mask_digest(export_mask(session))

    out_png = tmp_path / "replayed.png"
    code = cli_main(["simulate", "--model", str(toy["model"]),
                     "--replay", str(log_path), "--image", str(image_path),
                     "--bank", str(bank_path), "--prompts", str(prompts_path),
                     "--out", str(out_png)])
    assert code == 0
    from clicklabel.images import load_mask_png
    replayed = (load_mask_png(out_png) * 255).astype(np.uint8)
    assert mask_digest(replayed) == archived


def test_eval_errors_exit_nonzero(tmp_path, capsys):
    code = cli_main(["eval", "--scores", str(tmp_path / "missing"),
                     "--gt", str(tmp_path), "--report", str(tmp_path / "r.json")])
    assert code != 0
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert len(err.strip().splitlines()) == 1


def test_unknown_model_exit_nonzero(tmp_path, capsys):
    code = cli_main(["simulate", "--model", str(tmp_path / "nothing.adwt"),
                     "--dataset", str(tmp_path), "--report", str(tmp_path / "r.json")])
    assert code != 0
    assert capsys.readouterr().err.startswith("error:")


def test_seg_zero_click_simulate_equals_eval(toy, tmp_path):
    """Zero-click seg maps scored by `simulate` match `eval` on the same maps."""
    from clicklabel.images import save_png
    from clicklabel.pipeline import (PipelineConfig, averaged_prompt_features,
                                     bank_from_dataset, prepare_samples,
                                     prompt_features_by_defect)
    from clicklabel.refiner import load_params

    seg_model = toy["root"] / "seg.adwt"
    code = cli_main(["train", "--variant", "seg", "--config", str(toy["config"]),
                     "--click-model", str(toy["model"]), "--out", str(seg_model)])
    assert code == 0

    report_path = tmp_path / "sim0.json"
    assert cli_main(["simulate", "--model", str(seg_model),
                     "--dataset", str(toy["dataset"]), "--clicks", "0",
                     "--report", str(report_path)]) == 0
    sim = json.loads(report_path.read_text())

    sidecar = json.loads(Path(str(seg_model) + ".json").read_text())
    pipe = PipelineConfig.from_dict(sidecar["config"]["pipeline"])
    params = load_params(seg_model)
    bank = bank_from_dataset(toy["dataset"], pipe)
    pf = prompt_features_by_defect(toy["dataset"], pipe)
    samples = prepare_samples(toy["dataset"], "test", pipe, bank, pf)
    pa = averaged_prompt_features(pf)
    scores = tmp_path / "scores"
    gts = tmp_path / "gt"
    scores.mkdir()
    gts.mkdir()
    from clicklabel.features import FeatureTensor, save_tensor
    from clicklabel.refiner import forward

    for s in samples:
        v = pa.get(s.defect, next(iter(pa.values())))
        m = forward(s.residual, None, np.zeros(s.gt.shape), v, params)
        save_tensor(FeatureTensor(values=m[..., None].astype(np.float32)),
                    scores / f"{s.image_id}.adft")
        save_png((s.gt * 255).astype(np.uint8), gts / f"{s.image_id}.png")
    eval_report = tmp_path / "eval0.json"
    assert cli_main(["eval", "--scores", str(scores), "--gt", str(gts),
                     "--report", str(eval_report)]) == 0
    ev = json.loads(eval_report.read_text())
    # same pixels through both paths, float32 storage in between
    for key in ("ap", "pixel_auroc", "miou"):
        a, b = sim["aggregate"][key], ev["aggregate"][key]
        if a is None or b is None:
            assert a == b
        else:
            assert abs(a - b) < 1e-4, key
