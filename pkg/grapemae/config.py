import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .errors import ConfigurationError
from .models.vit import PRESETS

BATCH_PRESETS = {"T": 160, "S": 128, "B": 80}
SWEEP_AXES = ("mask_ratio", "aug_strength", "label_fraction", "pretrain_epochs")
AUG_MODES = ("crop_only", "simclr_strong", "none")

DEFAULT_CONFIG: Dict[str, Any] = {
    # model
    "preset": "T",
    "image_size": 224,
    "patch_size": 16,
    "depth": None,
    "embed_dim": None,
    "heads": None,
    "pre_norm": True,
    # pre-text (MAE)
    "batch_size": None,
    "pretrain_epochs": 3000,
    "warmup_epochs": 10,
    "pretrain_lr": 1e-3,
    "pretrain_lr_in1k": 1.5e-4,
    "pretrain_weight_decay": 0.5,
    "pretrain_betas": [0.9, 0.95],
    "mask_ratio": 0.60,
    "decoder_depth": 8,
    "decoder_dim": 512,
    "decoder_heads": 16,
    "norm_pix_loss": False,
    "loss_reduction": "mean",
    "pretrain_aug": "crop_only",
    "pretrain_crop_scale": [0.2, 1.0],
    # downstream
    "finetune_epochs": 100,
    "finetune_lr": 1e-3,
    "finetune_weight_decay": 0.05,
    "finetune_betas": [0.9, 0.999],
    "layer_decay": 0.65,
    "min_lr": 0.0,
    "finetune_aug": "simclr_strong",
    "finetune_crop_scale": [0.08, 1.0],
    "mixup_alpha": 0.8,
    "cutmix_alpha": 0.8,
    "mix_prob": 1.0,
    "label_fraction": 1.0,
    "freeze_epochs": 0,
    # data and files
    "seed": 0,
    "seeds": [0, 1, 2],
    "data_dir": "data/labeled",
    "unlabeled_dirs": ["data/unlabeled"],
    "manifest": None,
    "out_dir": "runs",
    "init_checkpoint": None,
    "resume_checkpoint": None,
    "eval_checkpoint": None,
    "checkpoint_every": 0.1,
    # evaluation
    "cka_images": 300,
    "accuracy_threshold": 0.70,
    "eval_split": "test",
    "weighted_average": False,
    # registry and sweeps
    "db_url": None,
    "sweep_axis": "mask_ratio",
    "sweep_values": [0.5, 0.6, 0.75],
}


def load_config(path: str | Path | None) -> Dict[str, Any]:
    """Load a flat JSON config over DEFAULT_CONFIG; with no path the defaults apply as they are."""
    if path is None:
        return dict(DEFAULT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        values = json.loads(p.read_text())
    except ValueError as e:
        raise ConfigurationError(f"{p}: not valid JSON ({e})") from e
    if not isinstance(values, dict):
        raise ConfigurationError(f"{p}: config must be a JSON object")
    unknown = sorted(set(values) - set(DEFAULT_CONFIG))
    if unknown:
        raise ConfigurationError(f"{p}: unknown config keys {unknown}")
    return {**DEFAULT_CONFIG, **values}


def parse_override(item: str) -> tuple[str, Any]:
    """KEY=VALUE with VALUE read as JSON when possible (numbers, lists, true/false/null)."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    key = key.strip()
    if key not in DEFAULT_CONFIG:
        raise ConfigurationError(f"unknown config key {key!r}")
    try:
        return key, json.loads(raw)
    except ValueError:
        return key, raw


def apply_overrides(values: Dict[str, Any], overrides: Sequence[str] = (), **flags) -> Dict[str, Any]:
    out = dict(values)
    for item in overrides:
        key, value = parse_override(item)
        out[key] = value
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


@dataclass
class ExperimentConfig:
    preset: str = "T"
    image_size: int = 224
    patch_size: int = 16
    depth: Optional[int] = None
    embed_dim: Optional[int] = None
    heads: Optional[int] = None
    pre_norm: bool = True
    batch_size: Optional[int] = None
    pretrain_epochs: int = 3000
    warmup_epochs: int = 10
    pretrain_lr: float = 1e-3
    pretrain_lr_in1k: float = 1.5e-4
    pretrain_weight_decay: float = 0.5
    pretrain_betas: List[float] = field(default_factory=lambda: [0.9, 0.95])
    mask_ratio: float = 0.60
    decoder_depth: int = 8
    decoder_dim: int = 512
    decoder_heads: int = 16
    norm_pix_loss: bool = False
    loss_reduction: str = "mean"
    pretrain_aug: str = "crop_only"
    pretrain_crop_scale: List[float] = field(default_factory=lambda: [0.2, 1.0])
    finetune_epochs: int = 100
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 0.05
    finetune_betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    layer_decay: float = 0.65
    min_lr: float = 0.0
    finetune_aug: str = "simclr_strong"
    finetune_crop_scale: List[float] = field(default_factory=lambda: [0.08, 1.0])
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 0.8
    mix_prob: float = 1.0
    label_fraction: float = 1.0
    freeze_epochs: int = 0
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    data_dir: str = "data/labeled"
    unlabeled_dirs: List[str] = field(default_factory=lambda: ["data/unlabeled"])
    manifest: Optional[str] = None
    out_dir: str = "runs"
    init_checkpoint: Optional[str] = None
    resume_checkpoint: Optional[str] = None
    eval_checkpoint: Optional[str] = None
    checkpoint_every: float = 0.1
    cka_images: int = 300
    accuracy_threshold: float = 0.70
    eval_split: str = "test"
    weighted_average: bool = False
    db_url: Optional[str] = None
    sweep_axis: str = "mask_ratio"
    sweep_values: List[Any] = field(default_factory=lambda: [0.5, 0.6, 0.75])

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys {unknown}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_mapping({**self.to_dict(), **changes})

    # ---- Derived values ----
    @property
    def preset_key(self) -> str:
        return self.preset.upper().removeprefix("VIT-")

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size or BATCH_PRESETS[self.preset_key]

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def registry_url(self) -> str:
        return self.db_url or f"sqlite:///{self.out_path / 'runs.db'}"

    def checkpoint_interval(self, total_epochs: int) -> int:
        return max(1, round(self.checkpoint_every * total_epochs))

    def pretext_hash(self) -> str:
        """Stable hash of every value the pre-text run depends on."""
        keys = (
            "preset", "image_size", "patch_size", "depth", "embed_dim", "heads", "pre_norm",
            "batch_size", "pretrain_epochs", "warmup_epochs", "pretrain_lr", "pretrain_weight_decay",
            "pretrain_betas", "mask_ratio", "decoder_depth", "decoder_dim", "decoder_heads",
            "norm_pix_loss", "loss_reduction", "pretrain_aug", "pretrain_crop_scale",
            "unlabeled_dirs", "seed", "min_lr",
        )
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    # ---- Validation ----
    def validate(self) -> None:
        if self.preset_key not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if (self.image_size // self.patch_size) ** 2 < 2:
            raise ConfigurationError("images must span at least 2 patches")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigurationError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigurationError(f"layer_decay must be in (0, 1], got {self.layer_decay}")
        for name in ("pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) <= self.warmup_epochs:
                raise ConfigurationError(f"warmup_epochs ({self.warmup_epochs}) must be below {name} ({getattr(self, name)})")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigurationError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")
        for name in ("pretrain_aug", "finetune_aug"):
            if getattr(self, name) not in AUG_MODES:
                raise ConfigurationError(f"{name} must be one of {AUG_MODES}, got {getattr(self, name)!r}")
        if not 0 <= self.freeze_epochs <= self.finetune_epochs:
            raise ConfigurationError(f"freeze_epochs must be in [0, finetune_epochs], got {self.freeze_epochs}")
        if not 0.0 < self.checkpoint_every <= 1.0:
            raise ConfigurationError(f"checkpoint_every must be a fraction in (0, 1], got {self.checkpoint_every}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigurationError(f"eval_split must be train, val or test, got {self.eval_split!r}")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigurationError(f"sweep_axis must be one of {SWEEP_AXES}, got {self.sweep_axis!r}")
        if self.cka_images < 3:
            raise ConfigurationError("cka_images must be at least 3")
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")


def build_config(path: str | Path | None, overrides: Sequence[str] = (), **flags) -> ExperimentConfig:
    return ExperimentConfig.from_mapping(apply_overrides(load_config(path), overrides, **flags))
