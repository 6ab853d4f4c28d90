"""
Masked-autoencoder pre-text task.

Random per-image masking, an encoder that sees only visible patches, a learned
mask token re-inserted at hidden positions, a lightweight transformer decoder,
and a reconstruction loss computed on hidden patches only.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from ..autodiff import Tensor, as_tensor, concat, expand, no_grad, take, take_along
from ..errors import ConfigurationError, LossError, ShapeError
from .base import LayerNorm, Linear, Module, trunc_normal
from .vit import Block, VitConfig, VitModel, patchify, run_blocks, unpatchify

Seed = Union[int, np.random.Generator, None]


def num_visible(total: int, mask_ratio: float) -> int:
    return max(1, int(total * (1.0 - mask_ratio) + 1e-9))


@dataclass(frozen=True)
class MaskingPlan:
    """
    Per-image masking for a batch.

    `shuffle` holds one permutation of 0..N-1 per image (B×N); its first
    `num_visible` entries are the visible patches. Index sets are kept sorted,
    so the same physical patch always keeps its place in the token stream.
    """

    total_patches: int
    mask_ratio: float
    shuffle: np.ndarray

    @classmethod
    def from_shuffle(cls, shuffle: np.ndarray, mask_ratio: float) -> "MaskingPlan":
        shuffle = np.atleast_2d(np.asarray(shuffle, dtype=np.int64))
        return cls(total_patches=shuffle.shape[1], mask_ratio=mask_ratio, shuffle=shuffle)

    @property
    def batch_size(self) -> int:
        return self.shuffle.shape[0]

    @property
    def num_visible(self) -> int:
        return num_visible(self.total_patches, self.mask_ratio)

    @property
    def visible_idx(self) -> np.ndarray:
        return np.sort(self.shuffle[:, : self.num_visible], axis=1)

    @property
    def hidden_idx(self) -> np.ndarray:
        return np.sort(self.shuffle[:, self.num_visible :], axis=1)

    @property
    def restore_idx(self) -> np.ndarray:
        """Position of each patch within concat(visible tokens, hidden tokens)."""
        return np.argsort(np.concatenate([self.visible_idx, self.hidden_idx], axis=1), axis=1)

    def hidden_mask(self) -> np.ndarray:
        """B×N indicator, 1 at hidden positions."""
        mask = np.zeros(self.shuffle.shape, dtype=np.float64)
        np.put_along_axis(mask, self.hidden_idx, 1.0, axis=1)
        return mask


def sample_mask(total: int, mask_ratio: float, seed: Seed = None, batch_size: int = 1) -> MaskingPlan:
    """Uniformly random permutation per image; the first floor(N(1-r)) patches stay visible."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigurationError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    if total < 2:
        raise ConfigurationError(f"masking needs at least 2 patches, got {total}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shuffle = np.stack([rng.permutation(total) for _ in range(batch_size)])
    return MaskingPlan(total_patches=total, mask_ratio=mask_ratio, shuffle=shuffle)


@dataclass(frozen=True)
class MaeConfig:
    decoder_depth: int = 8
    decoder_dim: int = 512
    decoder_heads: int = 16
    mask_ratio: float = 0.60
    norm_pix_loss: bool = False
    loss_reduction: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask ratio must be in [0, 1), got {self.mask_ratio}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigurationError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")


class MaeModel(Module):
    def __init__(self, encoder_config: VitConfig, config: MaeConfig, rng: np.random.Generator):
        super().__init__()
        if encoder_config.num_classes:
            encoder_config = VitConfig(**{**encoder_config.to_dict(), "num_classes": 0})
        self.config = config
        self.encoder: VitModel = self.add_module("encoder", VitModel(encoder_config, rng))
        dd = config.decoder_dim
        n = encoder_config.num_patches
        self.decoder_embed = self.add_module("decoder_embed", Linear(encoder_config.embed_dim, dd, rng))
        self.mask_token = self.add_param("mask_token", trunc_normal(rng, (dd,)))
        self.decoder_pos_embed = self.add_param("decoder_pos_embed", trunc_normal(rng, (n, dd)))
        self.decoder_blocks = [
            self.add_module(
                f"decoder_blocks.{i}",
                Block(dd, config.decoder_heads, encoder_config.mlp_ratio, rng, encoder_config.pre_norm),
            )
            for i in range(config.decoder_depth)
        ]
        self.decoder_norm = self.add_module("decoder_norm", LayerNorm(dd))
        self.decoder_pred = self.add_module("decoder_pred", Linear(dd, encoder_config.patch_dim, rng))

    @property
    def encoder_config(self) -> VitConfig:
        return self.encoder.config


def _check_plan(plan: MaskingPlan, batch: int, total: int) -> None:
    if plan.total_patches != total or plan.batch_size != batch:
        raise ShapeError(
            f"masking plan for {plan.batch_size}×{plan.total_patches} patches does not match input {batch}×{total}"
        )


def encode_visible(mae: MaeModel, patches: Union[Tensor, np.ndarray], plan: MaskingPlan) -> Tensor:
    """Latent z' for visible patches only: embed, add positional codes gathered by patch index, run the encoder."""
    patches = as_tensor(patches)
    if patches.ndim != 3:
        raise ShapeError(f"encode_visible expects B×N×P patches, got {patches.shape}")
    _check_plan(plan, patches.shape[0], patches.shape[1])
    enc = mae.encoder
    visible = plan.visible_idx
    x = enc.patch_embed(take_along(patches, visible)) + take(enc.pos_embed, visible)
    x, _, _ = run_blocks(enc.blocks, x)
    return enc.norm(x)


def decoder_input(mae: MaeModel, latent: Tensor, plan: MaskingPlan) -> Tensor:
    """Visible tokens scattered back to their positions, e_mask everywhere else (before positional codes)."""
    b, v, _ = latent.shape
    if v != plan.num_visible:
        raise ShapeError(f"latent carries {v} tokens but the plan keeps {plan.num_visible} visible")
    _check_plan(plan, b, plan.total_patches)
    dd = mae.config.decoder_dim
    tokens = mae.decoder_embed(latent)
    hidden = expand(mae.mask_token, (b, plan.total_patches - v, dd))
    return take_along(concat([tokens, hidden], axis=1), plan.restore_idx)


def decode_full(mae: MaeModel, latent: Tensor, plan: MaskingPlan) -> Tensor:
    """Reconstruction w' (B×N×P pixel predictions) from the visible latent."""
    x = decoder_input(mae, latent, plan) + mae.decoder_pos_embed
    x, _, _ = run_blocks(mae.decoder_blocks, x)
    return mae.decoder_pred(mae.decoder_norm(x))


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + eps)


def mae_loss(
    target_patches: Union[Tensor, np.ndarray],
    reconstruction: Tensor,
    plan: MaskingPlan,
    reduction: str = "mean",
    norm_pix: bool = False,
) -> Tensor:
    """
    Masked MSE: per-patch mean squared error summed over hidden patches only.

    `mean` divides by the number of hidden patches across the batch; `sum`
    keeps the raw per-image sum and averages it over the batch. Visible
    positions contribute exactly zero to the value and the gradient.
    """
    target = target_patches.data if isinstance(target_patches, Tensor) else np.asarray(target_patches, dtype=np.float64)
    if target.shape != reconstruction.shape:
        raise ShapeError(f"target {target.shape} and reconstruction {reconstruction.shape} differ")
    _check_plan(plan, target.shape[0], target.shape[1])
    mask = plan.hidden_mask()
    hidden_count = mask.sum()
    if hidden_count == 0:
        raise LossError("no hidden patches to reconstruct (mask ratio leaves every patch visible)")
    if norm_pix:
        target = normalize_patches(target)
    per_patch = ((reconstruction - Tensor(target)) ** 2).mean(axis=-1)
    masked = (per_patch * Tensor(mask)).sum()
    if reduction == "sum":
        return masked / float(target.shape[0])
    return masked / float(hidden_count)


def forward_loss(mae: MaeModel, images: np.ndarray, plan: MaskingPlan) -> Tuple[Tensor, Tensor]:
    patches = patchify(images, mae.encoder_config.patch_size)
    pred = decode_full(mae, encode_visible(mae, patches, plan), plan)
    loss = mae_loss(patches, pred, plan, mae.config.loss_reduction, mae.config.norm_pix_loss)
    return loss, pred


def pretrain_step(mae: MaeModel, batch: np.ndarray, plan_seed: Seed, optimizer, lr: float) -> float:
    """One mask → encode → decode → loss → backward → AdamW step. Fresh masks every call."""
    plan = sample_mask(mae.encoder_config.num_patches, mae.config.mask_ratio, plan_seed, batch_size=batch.shape[0])
    optimizer.zero_grad()
    loss, _ = forward_loss(mae, batch, plan)
    loss.backward()
    optimizer.step(lr)
    return loss.item()


def reconstruct(mae: MaeModel, images: np.ndarray, plan: Optional[MaskingPlan] = None, seed: Seed = None):
    """
    Returns (masked, reconstructed) image arrays. Hidden patches of `masked` are
    zeroed; `reconstructed` pastes predictions into the hidden positions only.
    """
    cfg = mae.encoder_config
    if plan is None:
        plan = sample_mask(cfg.num_patches, mae.config.mask_ratio, seed, batch_size=images.shape[0])
    patches = patchify(images, cfg.patch_size).data
    with no_grad():
        _, pred = forward_loss(mae, images, plan)
    pred = pred.data
    if mae.config.norm_pix_loss:
        mean = patches.mean(axis=-1, keepdims=True)
        std = np.sqrt(patches.var(axis=-1, keepdims=True) + 1e-6)
        pred = pred * std + mean
    hidden = plan.hidden_mask()[..., None]
    masked = patches * (1.0 - hidden)
    merged = np.clip(patches * (1.0 - hidden) + pred * hidden, 0.0, 1.0)
    size = cfg.image_size
    return (
        unpatchify(masked, cfg.patch_size, size, size).data,
        unpatchify(merged, cfg.patch_size, size, size).data,
    )
