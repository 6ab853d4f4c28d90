"""
Vision Transformer encoders (ViT-T/16, ViT-S/16, ViT-B/16).

No class token: the sequence carries patch tokens only and classification
pools them by global average. Positional encodings are learned and added
after the patch projection.
"""
import math
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Tuple, Union

import numpy as np

from ..autodiff import Tensor, as_tensor, gelu, softmax, take
from ..errors import ConfigurationError, ShapeError, UsageError
from .base import LayerNorm, Linear, Module, trunc_normal

# preset -> (embed_dim, heads, blocks)
PRESETS = {
    "T": (192, 3, 12),
    "S": (384, 6, 12),
    "B": (768, 12, 12),
}

# published parameter counts (millions) for the presets
REPORTED_PARAMS_M = {"T": 5.80, "S": 22.20, "B": 86.00}


@dataclass(frozen=True)
class VitConfig:
    patch_size: int = 16
    embed_dim: int = 192
    heads: int = 3
    blocks: int = 12
    mlp_ratio: float = 4.0
    num_classes: int = 0
    image_size: int = 224
    pre_norm: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        return asdict(self)


def build_vit_config(preset: str, image_size: int = 224, num_classes: int = 0, **overrides) -> VitConfig:
    """Preset values for ViT-T/S/B with 16-pixel patches; `overrides` shrink models for desk-scale runs."""
    key = preset.upper().removeprefix("VIT-")
    if key not in PRESETS:
        raise ConfigurationError(f"unknown ViT preset {preset!r}; expected one of {sorted(PRESETS)}")
    embed_dim, heads, blocks = PRESETS[key]
    cfg = VitConfig(
        patch_size=16,
        embed_dim=embed_dim,
        heads=heads,
        blocks=blocks,
        num_classes=num_classes,
        image_size=image_size,
    )
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg


def param_count(config: VitConfig) -> int:
    """Closed-form parameter count of VitModel(config), without allocating it."""
    d = config.embed_dim
    hidden = int(d * config.mlp_ratio)
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    total = config.patch_dim * d + d + config.num_patches * d + config.blocks * block + 2 * d
    if config.num_classes > 0:
        total += d * config.num_classes + config.num_classes
    return total


# -----------------------------
# Patch layout
# -----------------------------
def patchify(images: Union[Tensor, np.ndarray], patch_size: int) -> Tensor:
    """
    Split H×W×3 images (optionally batched) into N = (H/p)(W/p) flattened patches.

    Patches are ordered row-major over the patch grid; each patch is flattened
    in (row, col, channel) order.
    """
    x = as_tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"patchify expects (B,)H×W×3 images, got {x.shape}")
    b, h, w, _ = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}×{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(b, gh, p, gw, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * 3)
    return out.reshape(gh * gw, p * p * 3) if single else out


def unpatchify(patches: Union[Tensor, np.ndarray], patch_size: int, height: int, width: int) -> Tensor:
    x = as_tensor(patches)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    p = patch_size
    gh, gw = height // p, width // p
    if x.shape[1] != gh * gw or x.shape[2] != p * p * 3:
        raise ShapeError(f"cannot unpatchify {x.shape} into {height}×{width} with patch {p}")
    b = x.shape[0]
    out = x.reshape(b, gh, gw, p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, height, width, 3)
    return out.reshape(height, width, 3) if single else out


# -----------------------------
# Transformer block
# -----------------------------
class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"attention width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.qkv = self.add_module("qkv", Linear(dim, 3 * dim, rng))
        self.proj = self.add_module("proj", Linear(dim, dim, rng))

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        return multi_head_attention(x, self, self.heads)


def multi_head_attention(x: Tensor, params: Attention, heads: int) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention, softmax(QKᵀ/√d_k)·V per head, concatenated and projected.

    Accepts N×D or B×N×D tokens; returns the output and the attention weights
    (heads×N×N, or B×heads×N×N for batched input).
    """
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    b, n, d = x.shape
    if d % heads:
        raise ShapeError(f"token width {d} not divisible by {heads} heads")
    dk = d // heads
    qkv = params.qkv(x).reshape(b, n, 3, heads, dk).transpose(2, 0, 3, 1, 4)
    q, k, v = take(qkv, 0), take(qkv, 1), take(qkv, 2)
    attn = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk)), axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = params.proj(out)
    if single:
        return out.reshape(n, d), attn.reshape(heads, n, n)
    return out, attn


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.add_module("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.add_module("fc2", Linear(hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Block(Module):
    """Transformer block; pre-norm by default, post-norm when `pre_norm` is False."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator, pre_norm: bool = True):
        super().__init__()
        self.pre_norm = pre_norm
        self.norm1 = self.add_module("norm1", LayerNorm(dim))
        self.attn = self.add_module("attn", Attention(dim, heads, rng))
        self.norm2 = self.add_module("norm2", LayerNorm(dim))
        self.mlp = self.add_module("mlp", Mlp(dim, int(dim * mlp_ratio), rng))

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if self.pre_norm:
            y, attn = self.attn(self.norm1(x))
            x = x + y
            x = x + self.mlp(self.norm2(x))
        else:
            y, attn = self.attn(x)
            x = self.norm1(x + y)
            x = self.norm2(x + self.mlp(x))
        return x, attn


def run_blocks(blocks: List[Block], x: Tensor, capture: bool = False) -> Tuple[Tensor, List[Tensor], Optional[Tensor]]:
    per_block: List[Tensor] = []
    attn = None
    for blk in blocks:
        x, attn = blk(x)
        if capture:
            per_block.append(x)
    return x, per_block, attn


# -----------------------------
# Encoder
# -----------------------------
@dataclass
class Features:
    tokens: Tensor
    per_block_tokens: List[Tensor]
    last_attention: Optional[Tensor]


class VitModel(Module):
    def __init__(self, config: VitConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = self.add_module("patch_embed", Linear(config.patch_dim, d, rng))
        self.pos_embed = self.add_param("pos_embed", trunc_normal(rng, (config.num_patches, d)))
        self.blocks: List[Block] = [
            self.add_module(f"blocks.{i}", Block(d, config.heads, config.mlp_ratio, rng, config.pre_norm))
            for i in range(config.blocks)
        ]
        self.norm = self.add_module("norm", LayerNorm(d))
        self.head = self.add_module("head", Linear(d, config.num_classes, rng)) if config.num_classes > 0 else None

    def _check_images(self, images: Tensor) -> None:
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (size, size, 3):
            raise ShapeError(f"expected B×{size}×{size}×3 images, got {images.shape}")

    def forward_features(self, images: Union[Tensor, np.ndarray], capture: bool = False) -> Features:
        """
        Encode all patches. With `capture`, also keep every block's output and the
        last block's per-head attention for analysis.
        """
        images = as_tensor(images)
        self._check_images(images)
        x = self.patch_embed(patchify(images, self.config.patch_size)) + self.pos_embed
        x, per_block, attn = run_blocks(self.blocks, x, capture)
        return Features(self.norm(x), per_block, attn if capture else None)

    def classify(self, images: Union[Tensor, np.ndarray]) -> Tensor:
        """Logits = head(mean over tokens of the final token stream)."""
        if self.head is None:
            raise UsageError("classify needs a model with a classification head (num_classes > 0)")
        return self.head(self.forward_features(images).tokens.mean(axis=1))

    def count_params(self) -> int:
        return self.num_params()

    def encoder_state_dict(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("head.")}
