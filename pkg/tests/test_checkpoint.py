import struct

import numpy as np
import pytest

from grapemae.checkpoint import (
    MAGIC,
    Checkpoint,
    encoder_tensors_from,
    from_bytes,
    load_checkpoint,
    model_checkpoint,
    save_checkpoint,
    to_bytes,
    validate_shapes,
)
from grapemae.errors import CheckpointError
from grapemae.models.mae import MaeConfig, MaeModel
from grapemae.models.vit import VitConfig, VitModel


@pytest.fixture
def tiny_mae(tiny_vit, rng):
    return MaeModel(tiny_vit, MaeConfig(decoder_depth=1, decoder_dim=8, decoder_heads=2), rng)


def test_header_layout():
    data = to_bytes(Checkpoint({"w": np.arange(6.0).reshape(2, 3)}, {"epoch": 3}))
    assert data[:8] == MAGIC
    assert struct.unpack("<I", data[8:12]) == (1,)
    (meta_len,) = struct.unpack("<Q", data[12:20])
    assert data[20 : 20 + meta_len] == b'{"epoch":3}'


def test_save_load_resave_is_byte_identical(tmp_path, tiny_mae):
    ckpt = model_checkpoint(tiny_mae, {"preset": "T"}, epoch=4, rng_state={"seed": 0, "next_epoch": 5})
    first = save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(first)
    second = save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert first.read_bytes() == second.read_bytes()
    assert loaded.epoch == 4 and loaded.config == {"preset": "T"}
    assert loaded.meta["rng_state"] == {"seed": 0, "next_epoch": 5}
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_scalar_and_empty_tensors_survive(tmp_path):
    ckpt = Checkpoint({"s": np.array(2.5), "e": np.zeros((0, 4)), "t": np.ones((2, 3)).T})
    back = from_bytes(to_bytes(ckpt))
    assert back.tensors["s"].shape == () and back.tensors["s"] == 2.5
    assert back.tensors["e"].shape == (0, 4)
    np.testing.assert_array_equal(back.tensors["t"], np.ones((3, 2)))
    saved = load_checkpoint(save_checkpoint(tmp_path / "scalar.ckpt", ckpt))
    assert saved.tensors["s"].shape == ()


def test_corrupt_inputs_are_rejected(tmp_path):
    data = to_bytes(Checkpoint({"w": np.ones(3)}, {"epoch": 1}))
    with pytest.raises(CheckpointError):
        from_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        from_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        from_bytes(data + b"\x00")
    bumped = data[:8] + struct.pack("<I", 2) + data[12:]
    with pytest.raises(CheckpointError):
        from_bytes(bumped)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_shape_mismatch_lists_offending_tensors(tiny_vit, rng):
    model = VitModel(tiny_vit, rng)
    wider = VitModel(VitConfig(**{**tiny_vit.to_dict(), "embed_dim": 8}), rng)
    with pytest.raises(CheckpointError) as err:
        validate_shapes(model_checkpoint(wider, {}, 0), model)
    assert any(line.startswith("pos_embed:") for line in err.value.offending)
    assert any("blocks.0.attn.qkv.weight" in line for line in err.value.offending)


def test_missing_tensors(tiny_vit, rng):
    headed = VitModel(VitConfig(**{**tiny_vit.to_dict(), "num_classes": 3}), rng)
    headless = model_checkpoint(VitModel(tiny_vit, rng), {}, 0)
    with pytest.raises(CheckpointError) as err:
        validate_shapes(headless, headed)
    assert set(err.value.offending) == {"head.weight", "head.bias"}
    assert set(validate_shapes(headless, headed, allow_missing=True)) == {"head.weight", "head.bias"}


def test_encoder_transfer_from_pretext(tiny_mae, tiny_vit, rng):
    ckpt = model_checkpoint(tiny_mae, {}, 2)
    assert ckpt.has_decoder()
    encoder = encoder_tensors_from(ckpt)
    assert not any(k.startswith(("decoder_", "mask_token")) for k in encoder)
    classifier = VitModel(VitConfig(**{**tiny_vit.to_dict(), "num_classes": 4}), rng)
    missing = classifier.load_state_dict(encoder, strict=False)
    assert set(missing) == {"head.weight", "head.bias"}
    np.testing.assert_array_equal(classifier.pos_embed.data, tiny_mae.encoder.pos_embed.data)


def test_finetune_checkpoint_has_no_decoder(tiny_vit, rng):
    classifier = VitModel(VitConfig(**{**tiny_vit.to_dict(), "num_classes": 4}), rng)
    ckpt = model_checkpoint(classifier, {}, 1, optimizer_tensors={"optim.exp_avg.head.bias": np.zeros(4)})
    assert not ckpt.has_decoder()
    assert set(ckpt.optimizer_tensors()) == {"optim.exp_avg.head.bias"}
    assert "optim.exp_avg.head.bias" not in ckpt.model_tensors()
