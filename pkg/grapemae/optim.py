"""
AdamW with decoupled weight decay, cosine schedule with linear warmup, and
layer-wise learning-rate decay for fine-tuning.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from logzero import logger

from .autodiff import Tensor
from .errors import ConfigurationError, OptimizerError
from .models.base import Module
from .models.vit import VitModel

NamedParams = List[Tuple[str, Tensor]]


@dataclass
class ParamGroup:
    name: str
    params: NamedParams
    lr_scale: float = 1.0
    weight_decay: float = 0.0


@dataclass
class OptimState:
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


def excluded_from_decay(name: str, p: Tensor) -> bool:
    """Biases, norm scales/offsets, the mask token and positional encodings carry no weight decay."""
    return p.ndim < 2 or "pos_embed" in name or "mask_token" in name


def param_groups(model: Module, weight_decay: float) -> List[ParamGroup]:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if excluded_from_decay(name, p) else decay).append((name, p))
    return [
        ParamGroup("decay", decay, 1.0, weight_decay),
        ParamGroup("no_decay", no_decay, 1.0, 0.0),
    ]


def layer_id(name: str, num_layers: int) -> int:
    """0 for patch embedding / positional encoding, i+1 for block i, num_layers+1 for norm and head."""
    if name.startswith(("patch_embed", "pos_embed")):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return num_layers + 1


def layerwise_lr_groups(model: VitModel, decay: float = 0.65, weight_decay: float = 0.0) -> List[ParamGroup]:
    """
    Head gets multiplier 1, block i of L gets decay**(L - i), patch embedding and
    positional encoding get decay**(L + 1).
    """
    if not 0.0 < decay <= 1.0:
        raise ConfigurationError(f"layer decay must be in (0, 1], got {decay}")
    num_layers = len(model.blocks)
    groups: Dict[str, ParamGroup] = {}
    for name, p in model.named_parameters():
        lid = layer_id(name, num_layers)
        scale = decay ** (num_layers + 1 - lid)
        no_wd = excluded_from_decay(name, p)
        key = f"layer_{lid}_{'no_decay' if no_wd else 'decay'}"
        if key not in groups:
            groups[key] = ParamGroup(key, [], scale, 0.0 if no_wd else weight_decay)
        groups[key].params.append((name, p))
    return list(groups.values())


def adamw_step(
    p: np.ndarray,
    grad: np.ndarray,
    exp_avg: np.ndarray,
    exp_avg_sq: np.ndarray,
    step: int,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place AdamW update of `p` and its moments; `step` is the 1-based step count."""
    beta1, beta2 = betas
    p *= 1.0 - lr * weight_decay
    exp_avg *= beta1
    exp_avg += (1.0 - beta1) * grad
    exp_avg_sq *= beta2
    exp_avg_sq += (1.0 - beta2) * grad * grad
    m_hat = exp_avg / (1.0 - beta1 ** step)
    v_hat = exp_avg_sq / (1.0 - beta2 ** step)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, groups: Sequence[ParamGroup], betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = list(groups)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = eps
        self.state = OptimState()
        self.frozen: set = set()

    def named_parameters(self) -> NamedParams:
        return [item for g in self.groups for item in g.params]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def step(self, lr: float) -> None:
        for g in self.groups:
            for name, p in g.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise OptimizerError(f"non-finite gradient for {name} in group {g.name}", group=g.name)
        self.state.step += 1
        for g in self.groups:
            group_lr = 0.0 if g.name in self.frozen else lr * g.lr_scale
            for name, p in g.params:
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                m = self.state.exp_avg.setdefault(name, np.zeros_like(p.data))
                v = self.state.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
                adamw_step(p.data, grad, m, v, self.state.step, group_lr, self.betas, self.eps, g.weight_decay)

    def freeze(self, group_names: Sequence[str]) -> None:
        self.frozen = set(group_names)

    # ---- Checkpoint state ----
    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, _ in self.named_parameters():
            if name in self.state.exp_avg:
                out[f"optim.exp_avg.{name}"] = self.state.exp_avg[name]
                out[f"optim.exp_avg_sq.{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], step: int) -> None:
        self.state.step = step
        for name, _ in self.named_parameters():
            m = tensors.get(f"optim.exp_avg.{name}")
            v = tensors.get(f"optim.exp_avg_sq.{name}")
            if m is not None and v is not None:
                self.state.exp_avg[name] = np.array(m)
                self.state.exp_avg_sq[name] = np.array(v)
        logger.debug(f"[optim] restored moments for {len(self.state.exp_avg)} tensors at step {step}")


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigurationError(
                f"warmup_epochs ({self.warmup_epochs}) must be below total_epochs ({self.total_epochs})"
            )
        if self.steps_per_epoch < 1:
            raise ConfigurationError("steps_per_epoch must be at least 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def cosine_warmup_lr(spec: ScheduleSpec, global_step: int) -> float:
    """Linear ramp 0 → base_lr over the warmup steps, then cosine decay to min_lr; clamps past the end."""
    warmup, total = spec.warmup_steps, spec.total_steps
    if global_step < warmup:
        return spec.base_lr * global_step / warmup
    if global_step >= total:
        return spec.min_lr
    progress = (global_step - warmup) / (total - warmup)
    return spec.min_lr + (spec.base_lr - spec.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def group_multipliers(groups: Sequence[ParamGroup]) -> Dict[str, float]:
    return {name: g.lr_scale for g in groups for name, _ in g.params}


def encoder_group_names(groups: Sequence[ParamGroup], num_layers: int) -> List[str]:
    """Every group except the top layer (final norm and head)."""
    top = f"layer_{num_layers + 1}_"
    return [g.name for g in groups if not g.name.startswith(top)]
