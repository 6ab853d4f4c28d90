import json

import pandas as pd
import pytest
from PIL import Image

from grapemae.controller import ExperimentController
from grapemae.data import read_manifest
from grapemae.main import main


@pytest.fixture
def config_file(tiny_cfg, tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_cfg.to_dict()))
    return path


def run(config_file, *argv):
    return main(["--config", str(config_file), "--no-progress", *argv])


# ---- exit statuses ----
def test_usage_errors_exit_2(config_file, capsys):
    assert main(["bogus"]) == 2
    assert run(config_file, "slice", "src") == 2
    assert run(config_file, "cka", "a.ckpt", "b.ckpt", "c.ckpt") == 2


def test_domain_errors_exit_1(config_file, tmp_path):
    assert run(config_file, "eval") == 1
    assert run(config_file, "--set", "colour=red", "split") == 1
    assert run(config_file, "--set", "mask_ratio=1.0", "pretrain") == 1
    assert run(config_file, "attn", str(tmp_path / "absent.ckpt"), "x.png") == 1
    assert run(config_file, "split", "--data-dir", str(tmp_path / "nowhere")) == 1


def test_bad_config_file_exits_1(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text('{"pretrain_epochs": 3,}')
    assert main(["--config", str(broken), "--no-progress", "split"]) == 1
    assert main(["--config", str(tmp_path / "absent.json"), "--no-progress", "split"]) == 1


def test_unknown_command_on_controller(tiny_cfg):
    assert ExperimentController(tiny_cfg, progress=False).call_command("teleport") == 2


# ---- pipeline ----
def test_synth_and_slice(config_file, tmp_path):
    assert run(config_file, "synth", str(tmp_path / "g"), "--classes", "3", "--per-class", "5", "--size", "16") == 0
    assert len(list((tmp_path / "g").rglob("*.ppm"))) == 15
    assert run(config_file, "slice", str(tmp_path / "g"), str(tmp_path / "s"), "--side", "8") == 0
    assert len(list((tmp_path / "s").rglob("*.ppm"))) == 60


def test_full_pipeline(config_file, tiny_cfg, synth_root):
    out = tiny_cfg.out_path
    assert run(config_file, "split", "--data-dir", str(synth_root)) == 0
    split = read_manifest(out / "split.csv")
    assert len(split.items) == 48

    assert run(config_file, "pretrain") == 0
    assert (out / "pretrain.ckpt").exists()
    assert len(pd.read_csv(out / "pretrain_loss.csv")) == 3

    assert run(config_file, "finetune", "--init", str(out / "pretrain.ckpt")) == 0
    assert (out / "best.ckpt").exists()

    assert run(config_file, "eval", "--checkpoint", str(out / "best.ckpt")) == 0
    metrics = pd.read_csv(out / "metrics_test.csv")
    assert metrics["class"].tolist()[-2:] == ["macro", "accuracy"]
    assert len(metrics) == 4 + 2
    assert Image.open(out / "confusion_test.png").size == (4, 4)
    assert (out / "class_accuracy_test.csv").exists() and (out / "low_accuracy_test.csv").exists()

    assert run(config_file, "cka", str(out / "pretrain.ckpt"), str(out / "best.ckpt")) == 0
    lines = (out / "cka.csv").read_text().splitlines()
    assert lines[0] == "# images=8"
    assert len(lines) == 2 + 1

    image = split.subset("test")[0].path
    assert run(config_file, "attn", str(out / "best.ckpt"), image) == 0
    heads = sorted((out / "attn").glob("*_head??.png"))
    assert len(heads) == 2
    assert Image.open(heads[0]).size == (4, 4)

    assert run(config_file, "reconstruct", str(out / "pretrain.ckpt"), "--count", "2") == 0
    panel = Image.open(out / "reconstruct" / "sample_00.png")
    assert panel.size == (48, 16)


def test_resume_flag_continues_pretrain(config_file, tiny_cfg, tmp_path):
    assert run(config_file, "pretrain") == 0
    midway = tiny_cfg.out_path / "checkpoints" / "pretrain_e0002.ckpt"
    resumed = tmp_path / "resumed"
    assert run(config_file, "--out", str(resumed), "pretrain", "--resume", str(midway)) == 0
    assert (resumed / "pretrain_loss.csv").read_bytes() == (tiny_cfg.out_path / "pretrain_loss.csv").read_bytes()


def test_cka_of_checkpoint_with_itself(tiny_cfg):
    controller = ExperimentController(tiny_cfg, progress=False)
    pretrained = controller.cmd_pretrain()
    heat = controller.cmd_cka(str(pretrained))
    assert heat.shape == (1, 1)
    assert heat[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_eval_on_train_split_matches_finetune_record(tiny_cfg):
    controller = ExperimentController(tiny_cfg, progress=False)
    controller.cmd_finetune()
    history = pd.read_csv(tiny_cfg.out_path / "finetune_metrics.csv")
    last = str(tiny_cfg.out_path / "finetune.ckpt")
    report = controller.cmd_eval(tiny_cfg.replace(eval_checkpoint=last, eval_split="train"))
    assert report.accuracy == pytest.approx(history["train_accuracy"].iloc[-1], abs=1e-12)


def test_registry_records_runs(tiny_cfg):
    controller = ExperimentController(tiny_cfg, progress=False)
    controller.cmd_pretrain()
    assert controller.call_command("eval") == 1
    runs = controller.runs.list_runs()
    assert [r["command"] for r in runs] == ["pretrain"]
    assert runs[0]["status"] == "completed"
    assert runs[0]["metrics"]["final_loss"] > 0


# ---- sweeps ----
def test_sweep_reuses_pretext_and_writes_rows(tiny_cfg):
    cfg = tiny_cfg.replace(pretrain_epochs=2, finetune_epochs=2)
    controller = ExperimentController(cfg, progress=False)
    path = controller.cmd_sweep("label_fraction", [0.5, 1.0])
    rows = pd.read_csv(path)
    assert rows["value"].tolist() == [0.5, 1.0]
    assert rows["status"].tolist() == ["completed", "completed"]
    assert rows["macro_f1"].between(0, 1).all()
    # label fraction does not touch the pre-text config, so one pre-text run serves both points
    assert len(controller.runs.list_runs(command="pretrain")) == 1
    assert len(controller.runs.list_runs(command="eval")) == 2


def test_sweep_rejects_bad_values_up_front(tiny_cfg):
    controller = ExperimentController(tiny_cfg, progress=False)
    assert controller.call_command("sweep", "mask_ratio", [0.5, 1.0]) == 1
    assert controller.runs.list_runs() == []
    assert controller.call_command("sweep", "patch_size", [4]) == 1
