"""
Pre-text (MAE) and downstream (classification) training loops.

Every random draw comes from a stream derived from (seed, purpose, epoch), so a
run resumed from an epoch checkpoint replays exactly what an unbroken run does.
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from logzero import logger
from tqdm import tqdm

from .augment import AugPolicy, augment_image, center_crop_resize, mix_batch, one_hot
from .autodiff import Tensor, cross_entropy, no_grad
from .checkpoint import Checkpoint, encoder_tensors_from, model_checkpoint, save_checkpoint, validate_shapes
from .config import ExperimentConfig
from .data import ImageCache, LabeledItem, SplitSpec, iterate_batches, list_images, subset_fraction
from .errors import CheckpointError, DecodeError, InputError
from .evaluation import ConfusionMatrix, MetricsReport, confusion_matrix, metrics
from .models.mae import MaeConfig, MaeModel, pretrain_step
from .models.vit import VitConfig, VitModel, build_vit_config
from .optim import (
    AdamW,
    ScheduleSpec,
    cosine_warmup_lr,
    encoder_group_names,
    layerwise_lr_groups,
    param_groups,
)
from .train_state import TrainState

STREAMS = {"init": 0, "pretext": 1, "downstream": 2, "subset": 3, "split": 4, "sample": 5, "mask": 6}

PRETRAIN_COLUMNS = ["epoch", "mean_loss", "lr"]
FINETUNE_COLUMNS = [
    "epoch",
    "train_loss",
    "train_accuracy",
    "val_accuracy",
    "val_macro_precision",
    "val_macro_recall",
    "val_macro_f1",
    "lr",
]


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[purpose], *keys)))


# -----------------------------
# Builders
# -----------------------------
def encoder_config(cfg: ExperimentConfig, num_classes: int = 0) -> VitConfig:
    return build_vit_config(
        cfg.preset,
        image_size=cfg.image_size,
        num_classes=num_classes,
        patch_size=cfg.patch_size,
        blocks=cfg.depth,
        embed_dim=cfg.embed_dim,
        heads=cfg.heads,
        pre_norm=cfg.pre_norm,
    )


def mae_config(cfg: ExperimentConfig) -> MaeConfig:
    return MaeConfig(
        decoder_depth=cfg.decoder_depth,
        decoder_dim=cfg.decoder_dim,
        decoder_heads=cfg.decoder_heads,
        mask_ratio=cfg.mask_ratio,
        norm_pix_loss=cfg.norm_pix_loss,
        loss_reduction=cfg.loss_reduction,
    )


def build_mae(cfg: ExperimentConfig) -> MaeModel:
    return MaeModel(encoder_config(cfg), mae_config(cfg), stream(cfg.seed, "init"))


def build_classifier(cfg: ExperimentConfig, num_classes: int) -> VitModel:
    return VitModel(encoder_config(cfg, num_classes), stream(cfg.seed, "init", 1))


def pretext_policy(cfg: ExperimentConfig) -> AugPolicy:
    return AugPolicy(mode=cfg.pretrain_aug, crop_scale=tuple(cfg.pretrain_crop_scale))


def downstream_policy(cfg: ExperimentConfig) -> AugPolicy:
    return AugPolicy(
        mode=cfg.finetune_aug,
        crop_scale=tuple(cfg.finetune_crop_scale),
        mixup_alpha=cfg.mixup_alpha,
        cutmix_alpha=cfg.cutmix_alpha,
        mix_prob=cfg.mix_prob,
    )


def unlabeled_paths(dirs: Sequence[str]) -> List[str]:
    """Images from every pre-text directory, merged in directory order."""
    paths: List[str] = []
    for d in dirs:
        if not Path(d).is_dir():
            raise DecodeError(f"unlabeled image directory not found: {d}", path=str(d))
        paths.extend(str(p) for p in list_images(d))
    if not paths:
        raise InputError(f"no images found under {list(dirs)}")
    return paths


def write_curve(rows: List[Dict], columns: List[str], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    return path


def _progress(total_epochs: int, start: int, desc: str, progress: bool):
    # disable=None lets tqdm switch itself off when stderr is not a TTY
    return tqdm(range(start, total_epochs), desc=desc, initial=start, total=total_epochs, disable=None if progress else True)


# -----------------------------
# Pre-text
# -----------------------------
@dataclass
class PretrainResult:
    checkpoint_path: Path
    curve_path: Path
    state: TrainState


def pretrain(
    cfg: ExperimentConfig,
    out_dir: Path,
    resume: Optional[Checkpoint] = None,
    progress: bool = True,
) -> PretrainResult:
    out_dir = Path(out_dir)
    paths = unlabeled_paths(cfg.unlabeled_dirs)
    cache = ImageCache()
    mae = build_mae(cfg)
    optimizer = AdamW(param_groups(mae, cfg.pretrain_weight_decay), betas=tuple(cfg.pretrain_betas))
    batch_size = min(cfg.effective_batch_size, len(paths))
    spec = ScheduleSpec(
        base_lr=cfg.pretrain_lr,
        warmup_epochs=cfg.warmup_epochs,
        total_epochs=cfg.pretrain_epochs,
        steps_per_epoch=math.ceil(len(paths) / batch_size),
        min_lr=cfg.min_lr,
    )
    policy = pretext_policy(cfg)
    state = TrainState()
    if resume is not None:
        validate_shapes(resume, mae)
        mae.load_state_dict(resume.model_tensors())
        state = TrainState.from_meta(resume.meta.get("train_state", {}))
        optimizer.load_state_tensors(resume.optimizer_tensors(), int(resume.meta.get("optimizer_step", 0)))
        logger.info(f"[pretrain] resuming after epoch {state.epoch}")

    logger.info(
        f"[pretrain] {len(paths)} images, {mae.encoder.count_params():,} encoder params, "
        f"batch {batch_size}, mask ratio {cfg.mask_ratio:.2f}, {cfg.pretrain_epochs} epochs"
    )
    interval = cfg.checkpoint_interval(cfg.pretrain_epochs)
    curve_path = out_dir / "pretrain_loss.csv"
    last_path = out_dir / "pretrain.ckpt"
    for epoch in _progress(cfg.pretrain_epochs, state.epoch, "pretrain", progress):
        rng = stream(cfg.seed, "pretext", epoch)
        losses, lr = [], 0.0
        for idx in iterate_batches(len(paths), batch_size, rng):
            batch = np.stack([augment_image(cache.get(paths[i]), cfg.image_size, policy, rng) for i in idx])
            lr = cosine_warmup_lr(spec, state.global_step)
            losses.append(pretrain_step(mae, batch, rng, optimizer, lr))
            state.global_step += 1
        row = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)), "lr": lr}
        state.advance_epoch(row)
        logger.debug(f"[pretrain] epoch {state.epoch} loss={row['mean_loss']:.6f} lr={lr:.3e}")
        write_curve(state.history, PRETRAIN_COLUMNS, curve_path)
        if state.epoch % interval == 0 or state.epoch == cfg.pretrain_epochs:
            ckpt = _training_checkpoint(cfg, mae, optimizer, state)
            save_checkpoint(last_path, ckpt)
            save_checkpoint(out_dir / "checkpoints" / f"pretrain_e{state.epoch:04d}.ckpt", ckpt)
    if state.history:
        first, last = state.history[0]["mean_loss"], state.history[-1]["mean_loss"]
        logger.info(f"[pretrain] loss {first:.4f} → {last:.4f} over {state.epoch} epochs")
    return PretrainResult(last_path, curve_path, state)


def _training_checkpoint(cfg: ExperimentConfig, model, optimizer: AdamW, state: TrainState, extra: Optional[dict] = None) -> Checkpoint:
    return model_checkpoint(
        model,
        cfg.to_dict(),
        epoch=state.epoch,
        rng_state={"seed": cfg.seed, "next_epoch": state.epoch},
        optimizer_tensors=optimizer.state_tensors(),
        optimizer_step=optimizer.state.step,
        extra={"train_state": state.to_meta(), **(extra or {})},
    )


# -----------------------------
# Downstream
# -----------------------------
def predict(model: VitModel, items: Sequence[LabeledItem], cache: ImageCache, batch_size: int) -> np.ndarray:
    """Deterministic center-crop predictions, no augmentation."""
    size = model.config.image_size
    preds = []
    with no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            images = np.stack([center_crop_resize(cache.get(it.path), size) for it in chunk])
            preds.append(np.argmax(model.classify(images).data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_items(
    model: VitModel,
    items: Sequence[LabeledItem],
    class_names: List[str],
    cache: ImageCache,
    batch_size: int,
    threshold: float = 0.70,
    weighted: bool = False,
) -> Tuple[ConfusionMatrix, MetricsReport]:
    if not items:
        raise InputError("nothing to evaluate: the split is empty")
    preds = predict(model, items, cache, batch_size)
    cm = confusion_matrix(preds, [it.class_id for it in items], len(class_names), class_names)
    return cm, metrics(cm, threshold=threshold, weighted=weighted)


def load_encoder(model: VitModel, init: Checkpoint) -> None:
    """Copy pre-trained encoder weights into `model`; the decoder is dropped and the head stays fresh."""
    tensors = encoder_tensors_from(init)
    missing = model.load_state_dict(tensors, strict=False)
    not_head = [name for name in missing if not name.startswith("head.")]
    if not_head:
        raise CheckpointError("initial checkpoint lacks encoder tensors", not_head)
    logger.info(f"[finetune] initialized encoder from {len(tensors)} pre-trained tensors")


@dataclass
class FinetuneResult:
    best_path: Path
    last_path: Path
    curve_path: Path
    state: TrainState


def finetune(
    cfg: ExperimentConfig,
    split: SplitSpec,
    out_dir: Path,
    init: Optional[Checkpoint] = None,
    resume: Optional[Checkpoint] = None,
    progress: bool = True,
) -> FinetuneResult:
    out_dir = Path(out_dir)
    class_names = split.class_names
    train_items = subset_fraction(split.subset("train"), cfg.label_fraction, seed=cfg.seed)
    val_items = split.subset("val")
    if not train_items:
        raise InputError("the split has no training items")
    cache = ImageCache()
    model = build_classifier(cfg, len(class_names))
    if init is not None and resume is None:
        load_encoder(model, init)
    groups = layerwise_lr_groups(model, cfg.layer_decay, cfg.finetune_weight_decay)
    optimizer = AdamW(groups, betas=tuple(cfg.finetune_betas))
    encoder_groups = encoder_group_names(groups, len(model.blocks))
    batch_size = min(cfg.effective_batch_size, len(train_items))
    spec = ScheduleSpec(
        base_lr=cfg.finetune_lr,
        warmup_epochs=cfg.warmup_epochs,
        total_epochs=cfg.finetune_epochs,
        steps_per_epoch=math.ceil(len(train_items) / batch_size),
        min_lr=cfg.min_lr,
    )
    policy = downstream_policy(cfg)
    state = TrainState()
    if resume is not None:
        validate_shapes(resume, model)
        model.load_state_dict(resume.model_tensors())
        state = TrainState.from_meta(resume.meta.get("train_state", {}))
        optimizer.load_state_tensors(resume.optimizer_tensors(), int(resume.meta.get("optimizer_step", 0)))
        logger.info(f"[finetune] resuming after epoch {state.epoch}")

    logger.info(
        f"[finetune] {len(train_items)} train / {len(val_items)} val images, {len(class_names)} classes, "
        f"layer decay {cfg.layer_decay}, {cfg.finetune_epochs} epochs"
    )
    interval = cfg.checkpoint_interval(cfg.finetune_epochs)
    curve_path = out_dir / "finetune_metrics.csv"
    best_path, last_path = out_dir / "best.ckpt", out_dir / "finetune.ckpt"
    labels = np.array([it.class_id for it in train_items])
    for epoch in _progress(cfg.finetune_epochs, state.epoch, "finetune", progress):
        optimizer.freeze(encoder_groups if epoch < cfg.freeze_epochs else [])
        rng = stream(cfg.seed, "downstream", epoch)
        losses, lr = [], 0.0
        for idx in iterate_batches(len(train_items), batch_size, rng):
            images = np.stack([augment_image(cache.get(train_items[i].path), cfg.image_size, policy, rng) for i in idx])
            mixed = mix_batch(images, one_hot(labels[idx], len(class_names)), policy, rng)
            lr = cosine_warmup_lr(spec, state.global_step)
            optimizer.zero_grad()
            loss = cross_entropy(model.classify(mixed.images), Tensor(mixed.labels))
            loss.backward()
            optimizer.step(lr)
            losses.append(loss.item())
            state.global_step += 1
        _, train_report = evaluate_items(model, train_items, class_names, cache, batch_size)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "train_accuracy": train_report.accuracy}
        if val_items:
            _, val_report = evaluate_items(model, val_items, class_names, cache, batch_size)
            row.update(
                val_accuracy=val_report.accuracy,
                val_macro_precision=val_report.macro_precision,
                val_macro_recall=val_report.macro_recall,
                val_macro_f1=val_report.macro_f1,
            )
        else:
            row.update(val_accuracy=0.0, val_macro_precision=0.0, val_macro_recall=0.0, val_macro_f1=0.0)
        row["lr"] = lr
        state.advance_epoch(row)
        logger.debug(
            f"[finetune] epoch {state.epoch} loss={row['train_loss']:.4f} "
            f"train_acc={row['train_accuracy']:.4f} val_f1={row['val_macro_f1']:.4f}"
        )
        write_curve(state.history, FINETUNE_COLUMNS, curve_path)
        if state.offer(row["val_macro_f1"]):
            save_checkpoint(best_path, _training_checkpoint(cfg, model, optimizer, state, {"class_names": class_names}))
        if state.epoch % interval == 0 or state.epoch == cfg.finetune_epochs:
            ckpt = _training_checkpoint(cfg, model, optimizer, state, {"class_names": class_names})
            save_checkpoint(last_path, ckpt)
            save_checkpoint(out_dir / "checkpoints" / f"finetune_e{state.epoch:04d}.ckpt", ckpt)
    logger.info(f"[finetune] best val macro-F1 {state.best_score or 0.0:.4f} at epoch {state.best_epoch}")
    return FinetuneResult(best_path, last_path, curve_path, state)


def classifier_from_checkpoint(ckpt: Checkpoint) -> Tuple[VitModel, ExperimentConfig, List[str]]:
    """Rebuild a fine-tuned classifier with the architecture recorded in its checkpoint."""
    if ckpt.has_decoder():
        raise CheckpointError("expected a fine-tuned classifier, found a pre-text checkpoint")
    cfg = ExperimentConfig.from_mapping(ckpt.config)
    class_names = list(ckpt.meta.get("class_names", []))
    head = ckpt.tensors.get("head.bias")
    num_classes = len(class_names) or (head.shape[0] if head is not None else 0)
    model = build_classifier(cfg, num_classes)
    validate_shapes(ckpt, model)
    model.load_state_dict(ckpt.model_tensors())
    return model, cfg, class_names or [str(c) for c in range(num_classes)]


def encoder_from_checkpoint(ckpt: Checkpoint) -> Tuple[VitModel, ExperimentConfig]:
    """Headless encoder from either a pre-text or a fine-tuned checkpoint (for CKA and attention maps)."""
    cfg = ExperimentConfig.from_mapping(ckpt.config)
    model = VitModel(encoder_config(cfg), stream(cfg.seed, "init", 2))
    missing = model.load_state_dict(encoder_tensors_from(ckpt), strict=False)
    if missing:
        raise CheckpointError("checkpoint lacks encoder tensors", missing)
    return model, cfg


def mae_from_checkpoint(ckpt: Checkpoint) -> Tuple[MaeModel, ExperimentConfig]:
    if not ckpt.has_decoder():
        raise CheckpointError("expected a pre-text checkpoint with decoder tensors")
    cfg = ExperimentConfig.from_mapping(ckpt.config)
    mae = build_mae(cfg)
    validate_shapes(ckpt, mae)
    mae.load_state_dict(ckpt.model_tensors())
    return mae, cfg
