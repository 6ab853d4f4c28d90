from .base import LayerNorm, Linear, Module
from .vit import (
    PRESETS,
    Features,
    VitConfig,
    VitModel,
    build_vit_config,
    multi_head_attention,
    param_count,
    patchify,
    unpatchify,
)
from .mae import (
    MaeConfig,
    MaeModel,
    MaskingPlan,
    decode_full,
    encode_visible,
    mae_loss,
    pretrain_step,
    reconstruct,
    sample_mask,
)

__all__ = [
    "LayerNorm",
    "Linear",
    "Module",
    "PRESETS",
    "Features",
    "VitConfig",
    "VitModel",
    "build_vit_config",
    "multi_head_attention",
    "param_count",
    "patchify",
    "unpatchify",
    "MaeConfig",
    "MaeModel",
    "MaskingPlan",
    "decode_full",
    "encode_visible",
    "mae_loss",
    "pretrain_step",
    "reconstruct",
    "sample_mask",
]
