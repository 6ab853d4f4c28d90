import numpy as np
import pandas as pd
import pytest

from grapemae.checkpoint import load_checkpoint
from grapemae.data import read_manifest, scan_directory, split_capped, write_manifest
from grapemae.errors import CheckpointError, DecodeError
from grapemae.training import (
    FINETUNE_COLUMNS,
    PRETRAIN_COLUMNS,
    classifier_from_checkpoint,
    encoder_from_checkpoint,
    finetune,
    mae_from_checkpoint,
    pretrain,
    stream,
)


@pytest.fixture
def split(tiny_cfg):
    return split_capped(scan_directory(tiny_cfg.data_dir), seed=0)


def test_streams_are_independent():
    a = stream(0, "pretext", 3).random(4)
    np.testing.assert_array_equal(a, stream(0, "pretext", 3).random(4))
    assert not np.array_equal(a, stream(0, "pretext", 4).random(4))
    assert not np.array_equal(a, stream(0, "downstream", 3).random(4))
    assert not np.array_equal(a, stream(1, "pretext", 3).random(4))


def test_pretrain_writes_curve_and_checkpoints(tiny_cfg):
    result = pretrain(tiny_cfg, tiny_cfg.out_path, progress=False)
    curve = pd.read_csv(result.curve_path)
    assert list(curve.columns) == PRETRAIN_COLUMNS
    assert curve["epoch"].tolist() == [1, 2, 3]
    assert np.all(np.isfinite(curve["mean_loss"]))
    ckpt = load_checkpoint(result.checkpoint_path)
    assert ckpt.epoch == 3 and ckpt.has_decoder()
    assert ckpt.meta["rng_state"] == {"seed": 0, "next_epoch": 3}
    assert (tiny_cfg.out_path / "checkpoints" / "pretrain_e0001.ckpt").exists()
    mae, cfg = mae_from_checkpoint(ckpt)
    assert cfg.mask_ratio == tiny_cfg.mask_ratio
    np.testing.assert_array_equal(mae.mask_token.data, ckpt.tensors["mask_token"])


def test_pretrain_resume_matches_unbroken_run(tiny_cfg, tmp_path):
    unbroken = tiny_cfg.replace(out_dir=str(tmp_path / "a"))
    pretrain(unbroken, unbroken.out_path, progress=False)
    midway = load_checkpoint(unbroken.out_path / "checkpoints" / "pretrain_e0002.ckpt")

    resumed = tiny_cfg.replace(out_dir=str(tmp_path / "b"))
    pretrain(resumed, resumed.out_path, resume=midway, progress=False)

    a = (unbroken.out_path / "pretrain_loss.csv").read_bytes()
    b = (resumed.out_path / "pretrain_loss.csv").read_bytes()
    assert a == b
    final_a = load_checkpoint(unbroken.out_path / "pretrain.ckpt").tensors
    final_b = load_checkpoint(resumed.out_path / "pretrain.ckpt").tensors
    assert final_a.keys() == final_b.keys()
    for name in final_a:
        np.testing.assert_array_equal(final_a[name], final_b[name])


def test_pretrain_needs_images(tiny_cfg, tmp_path):
    with pytest.raises(DecodeError):
        pretrain(tiny_cfg.replace(unlabeled_dirs=[str(tmp_path / "missing")]), tmp_path, progress=False)


def test_finetune_from_pretext(tiny_cfg, split):
    pre = pretrain(tiny_cfg, tiny_cfg.out_path / "pre", progress=False)
    result = finetune(tiny_cfg, split, tiny_cfg.out_path / "ft", init=load_checkpoint(pre.checkpoint_path), progress=False)
    curve = pd.read_csv(result.curve_path)
    assert list(curve.columns) == FINETUNE_COLUMNS
    assert len(curve) == 3
    assert curve["train_accuracy"].between(0, 1).all()
    best = load_checkpoint(result.best_path)
    assert not best.has_decoder()
    assert best.epoch == result.state.best_epoch
    assert best.meta["class_names"] == split.class_names
    model, _, names = classifier_from_checkpoint(best)
    assert model.head is not None and names == split.class_names


def test_finetune_resume_matches_unbroken_run(tiny_cfg, split, tmp_path):
    unbroken = tiny_cfg.replace(out_dir=str(tmp_path / "a"))
    finetune(unbroken, split, unbroken.out_path, progress=False)
    midway = load_checkpoint(unbroken.out_path / "checkpoints" / "finetune_e0001.ckpt")
    resumed = tiny_cfg.replace(out_dir=str(tmp_path / "b"))
    finetune(resumed, split, resumed.out_path, resume=midway, progress=False)
    a = (unbroken.out_path / "finetune_metrics.csv").read_bytes()
    b = (resumed.out_path / "finetune_metrics.csv").read_bytes()
    assert a == b


def test_frozen_encoder_keeps_pretrained_weights(tiny_cfg, split):
    pre = pretrain(tiny_cfg, tiny_cfg.out_path / "pre", progress=False)
    init = load_checkpoint(pre.checkpoint_path)
    cfg = tiny_cfg.replace(freeze_epochs=3)
    result = finetune(cfg, split, cfg.out_path / "ft", init=init, progress=False)
    tuned = load_checkpoint(result.last_path).tensors
    np.testing.assert_array_equal(tuned["blocks.0.attn.qkv.weight"], init.tensors["encoder.blocks.0.attn.qkv.weight"])
    assert not np.array_equal(tuned["norm.gamma"], init.tensors["encoder.norm.gamma"])


def test_label_fraction_shrinks_training_set(tiny_cfg, split):
    # 8 train images per class; a quarter keeps 2 per class, one batch per epoch
    assert len(split.subset("train")) == 32
    full = finetune(tiny_cfg, split, tiny_cfg.out_path / "full", progress=False)
    assert full.state.global_step == 3 * 2
    cfg = tiny_cfg.replace(label_fraction=0.25)
    result = finetune(cfg, split, cfg.out_path / "quarter", progress=False)
    assert result.state.global_step == 3 * 1


def test_checkpoint_kind_checks(tiny_cfg, split):
    pre = pretrain(tiny_cfg, tiny_cfg.out_path / "pre", progress=False)
    pre_ckpt = load_checkpoint(pre.checkpoint_path)
    with pytest.raises(CheckpointError):
        classifier_from_checkpoint(pre_ckpt)
    encoder, _ = encoder_from_checkpoint(pre_ckpt)
    assert encoder.head is None
    ft = finetune(tiny_cfg, split, tiny_cfg.out_path / "ft", progress=False)
    with pytest.raises(CheckpointError):
        mae_from_checkpoint(load_checkpoint(ft.best_path))


def test_manifest_split_feeds_finetune(tiny_cfg, split, tmp_path):
    path = write_manifest(split, tmp_path / "split.csv")
    result = finetune(tiny_cfg, read_manifest(path), tiny_cfg.out_path, progress=False)
    assert result.best_path.exists()
