"""
Image and label augmentation.

Two regimes: crop-only for the pre-text task, and SimCLR-style transforms plus
CutMix/MixUp for fine-tuning. Images are H×W×3 float arrays in [0, 1]; every
transform is a deterministic function of (input, params, generator state).
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from logzero import logger
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import convolve1d

from .errors import ConfigurationError, InputError

Seed = Union[int, np.random.Generator, None]

CROP_ONLY = "crop_only"
SIMCLR_STRONG = "simclr_strong"
NO_AUG = "none"
LUMA = np.array([0.299, 0.587, 0.114])


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class AugPolicy:
    mode: str = CROP_ONLY
    crop_scale: Tuple[float, float] = (0.2, 1.0)
    mixup_alpha: float = 0.0
    cutmix_alpha: float = 0.0
    mix_prob: float = 0.0
    switch_prob: float = 0.5
    jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        if self.mode not in (CROP_ONLY, SIMCLR_STRONG, NO_AUG):
            raise ConfigurationError(f"unknown augmentation mode {self.mode!r}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError(f"crop scale range must lie in (0, 1], got {self.crop_scale}")
        if self.mixup_alpha < 0 or self.cutmix_alpha < 0:
            raise ConfigurationError("mixing alphas must be non-negative")

    @property
    def mixing(self) -> bool:
        return self.mix_prob > 0 and (self.mixup_alpha > 0 or self.cutmix_alpha > 0)

    @classmethod
    def pretext(cls) -> "AugPolicy":
        return cls(mode=CROP_ONLY, crop_scale=(0.2, 1.0))

    @classmethod
    def downstream(cls) -> "AugPolicy":
        return cls(mode=SIMCLR_STRONG, crop_scale=(0.08, 1.0), mixup_alpha=0.8, cutmix_alpha=0.8, mix_prob=1.0)


# -----------------------------
# Geometry
# -----------------------------
def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; a same-size resize is the identity."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def coords(n_out: int, n_in: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def center_crop_resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Largest centered square, resized to out_size; the deterministic evaluation transform."""
    h, w = image.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return resize_bilinear(image[top : top + side, left : left + side], out_size, out_size)


def sample_crop_box(
    h: int,
    w: int,
    scale_range: Tuple[float, float],
    ratio_range: Tuple[float, float],
    rng: np.random.Generator,
) -> Tuple[int, int, int, int]:
    area = h * w
    log_ratio = (math.log(ratio_range[0]), math.log(ratio_range[1]))
    for _ in range(10):
        target_area = area * rng.uniform(*scale_range)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(
    image: np.ndarray,
    out_size: int,
    scale_range: Tuple[float, float] = (0.08, 1.0),
    seed: Seed = None,
    ratio_range: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
) -> np.ndarray:
    h, w = image.shape[:2]
    if h < 8 or w < 8:
        raise InputError(f"image {h}×{w} is smaller than 8×8")
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ConfigurationError(f"crop scale range must lie in (0, 1], got {scale_range}")
    top, left, ch, cw = sample_crop_box(h, w, scale_range, ratio_range, _rng(seed))
    return resize_bilinear(image[top : top + ch, left : left + cw], out_size, out_size)


# -----------------------------
# Photometric
# -----------------------------
def to_grayscale(image: np.ndarray) -> np.ndarray:
    luma = np.clip(image @ LUMA, 0.0, 1.0)
    return np.repeat(luma[..., None], 3, axis=-1)


def _blend(a: np.ndarray, b, factor: float) -> np.ndarray:
    return np.clip(factor * a + (1.0 - factor) * b, 0.0, 1.0)


def color_jitter(
    image: np.ndarray,
    brightness: float = 0.4,
    contrast: float = 0.4,
    saturation: float = 0.4,
    hue: float = 0.1,
    seed: Seed = None,
) -> np.ndarray:
    """Brightness, contrast, saturation, then hue; each factor drawn from [max(0, 1-s), 1+s] (hue shift from [-h, h])."""
    if min(brightness, contrast, saturation, hue) < 0:
        raise ConfigurationError("jitter factors must be non-negative")
    rng = _rng(seed)
    out = image.copy()
    if brightness > 0:
        out = np.clip(out * rng.uniform(max(0.0, 1 - brightness), 1 + brightness), 0.0, 1.0)
    if contrast > 0:
        mean = float((out @ LUMA).mean())
        out = _blend(out, mean, rng.uniform(max(0.0, 1 - contrast), 1 + contrast))
    if saturation > 0:
        out = _blend(out, to_grayscale(out), rng.uniform(max(0.0, 1 - saturation), 1 + saturation))
    if hue > 0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with radius ceil(3σ) and reflected borders."""
    if sigma <= 0:
        raise ConfigurationError(f"blur sigma must be positive, got {sigma}")
    kernel = gaussian_kernel(sigma)
    out = convolve1d(image, kernel, axis=0, mode="reflect")
    out = convolve1d(out, kernel, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def augment_image(image: np.ndarray, out_size: int, policy: AugPolicy, seed: Seed = None) -> np.ndarray:
    """Per-image transform for the policy's mode."""
    rng = _rng(seed)
    if policy.mode == NO_AUG:
        return center_crop_resize(image, out_size)
    out = random_resized_crop(image, out_size, policy.crop_scale, rng)
    if policy.mode == CROP_ONLY:
        return out
    if rng.random() < policy.jitter_prob:
        out = color_jitter(out, *policy.jitter, seed=rng)
    if rng.random() < policy.grayscale_prob:
        out = to_grayscale(out)
    if rng.random() < policy.blur_prob:
        out = gaussian_blur(out, rng.uniform(*policy.blur_sigma))
    return out


# -----------------------------
# Batch mixing
# -----------------------------
@dataclass
class MixResult:
    images: np.ndarray
    labels: np.ndarray
    lam: float
    applied: bool
    kind: str = ""


def sample_beta(alpha: float, seed: Seed = None) -> float:
    if alpha <= 0:
        raise ConfigurationError(f"Beta concentration must be positive, got {alpha}")
    return float(_rng(seed).beta(alpha, alpha))


def _partner(batch: int, rng: np.random.Generator, partner: Optional[np.ndarray]) -> np.ndarray:
    return rng.permutation(batch) if partner is None else np.asarray(partner, dtype=np.int64)


def mixup(
    images: np.ndarray,
    labels: np.ndarray,
    alpha: float = 0.8,
    seed: Seed = None,
    lam: Optional[float] = None,
    partner: Optional[np.ndarray] = None,
) -> MixResult:
    """x ← λx + (1-λ)x̃ with λ ~ Beta(α, α); labels mixed with the same λ."""
    if images.shape[0] < 2:
        logger.warning("[augment] mixup needs a batch of at least 2; batch left unchanged")
        return MixResult(images, labels, 1.0, False, "mixup")
    rng = _rng(seed)
    lam = sample_beta(alpha, rng) if lam is None else float(lam)
    idx = _partner(images.shape[0], rng, partner)
    mixed = lam * images + (1.0 - lam) * images[idx]
    mixed_labels = lam * labels + (1.0 - lam) * labels[idx]
    return MixResult(np.clip(mixed, 0.0, 1.0), mixed_labels, lam, True, "mixup")


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """Box of area ≈ (1-λ)·H·W centered uniformly, clipped to the image; (top, left, bottom, right)."""
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    top, bottom = np.clip([cy - ch // 2, cy + ch // 2], 0, h)
    left, right = np.clip([cx - cw // 2, cx + cw // 2], 0, w)
    return int(top), int(left), int(bottom), int(right)


def cutmix(
    images: np.ndarray,
    labels: np.ndarray,
    alpha: float = 0.8,
    seed: Seed = None,
    lam: Optional[float] = None,
    partner: Optional[np.ndarray] = None,
    box: Optional[Tuple[int, int, int, int]] = None,
) -> MixResult:
    """Paste a partner rectangle; label weight is recomputed from the clipped box area."""
    if images.shape[0] < 2:
        logger.warning("[augment] cutmix needs a batch of at least 2; batch left unchanged")
        return MixResult(images, labels, 1.0, False, "cutmix")
    rng = _rng(seed)
    h, w = images.shape[1:3]
    if box is None:
        lam = sample_beta(alpha, rng) if lam is None else float(lam)
        box = cutmix_box(h, w, lam, rng)
    top, left, bottom, right = box
    idx = _partner(images.shape[0], rng, partner)
    mixed = images.copy()
    mixed[:, top:bottom, left:right] = images[idx, top:bottom, left:right]
    lam = 1.0 - (bottom - top) * (right - left) / float(h * w)
    mixed_labels = lam * labels + (1.0 - lam) * labels[idx]
    return MixResult(mixed, mixed_labels, lam, True, "cutmix")


def mix_batch(images: np.ndarray, labels: np.ndarray, policy: AugPolicy, seed: Seed = None) -> MixResult:
    """CutMix or MixUp, never both: a fair coin picks one per batch when both are enabled."""
    rng = _rng(seed)
    if not policy.mixing or rng.random() >= policy.mix_prob:
        return MixResult(images, labels, 1.0, False)
    use_cutmix = policy.cutmix_alpha > 0 and (policy.mixup_alpha <= 0 or rng.random() < policy.switch_prob)
    if use_cutmix:
        return cutmix(images, labels, policy.cutmix_alpha, rng)
    return mixup(images, labels, policy.mixup_alpha, rng)


def one_hot(class_ids: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(class_ids), num_classes))
    out[np.arange(len(class_ids)), np.asarray(class_ids, dtype=np.int64)] = 1.0
    return out
