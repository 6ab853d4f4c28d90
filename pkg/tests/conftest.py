import numpy as np
import pytest

from grapemae.config import ExperimentConfig
from grapemae.data import synth_dataset
from grapemae.models.vit import VitConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit():
    """2 blocks, 16-wide, 4×4 patch grid on 16px images."""
    return VitConfig(patch_size=4, embed_dim=16, heads=2, blocks=2, image_size=16)


@pytest.fixture
def synth_root(tmp_path):
    root = tmp_path / "synth"
    synth_dataset(root, num_classes=4, per_class=12, image_size=16, seed=7)
    return root


@pytest.fixture
def tiny_cfg(tmp_path, synth_root):
    return ExperimentConfig.from_mapping(
        {
            "preset": "T",
            "image_size": 16,
            "patch_size": 4,
            "depth": 1,
            "embed_dim": 16,
            "heads": 2,
            "batch_size": 16,
            "pretrain_epochs": 3,
            "finetune_epochs": 3,
            "warmup_epochs": 1,
            "decoder_depth": 1,
            "decoder_dim": 16,
            "decoder_heads": 2,
            "finetune_aug": "none",
            "mix_prob": 0.0,
            "seeds": [0],
            "data_dir": str(synth_root),
            "unlabeled_dirs": [str(synth_root)],
            "out_dir": str(tmp_path / "out"),
            "db_url": "sqlite://",
        }
    )
