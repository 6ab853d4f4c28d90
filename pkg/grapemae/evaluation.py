"""
Classification metrics, confusion matrices, linear CKA between encoder blocks,
and per-head attention maps.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from logzero import logger
from tabulate import tabulate

from .autodiff import no_grad
from .data import save_gray, save_image
from .errors import InputError, ShapeError, UndefinedSimilarityError
from .models.vit import VitModel

PathLike = Union[str, Path]


# -----------------------------
# Confusion matrix
# -----------------------------
@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: List[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def names(self) -> List[str]:
        return self.class_names or [str(c) for c in range(self.num_classes)]


def confusion_matrix(
    preds: Sequence[int], truths: Sequence[int], num_classes: int, class_names: Optional[List[str]] = None
) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise InputError(f"{preds.size} predictions for {truths.size} labels")
    for label, ids in (("prediction", preds), ("label", truths)):
        bad = ids[(ids < 0) | (ids >= num_classes)]
        if bad.size:
            raise InputError(f"{label} id {int(bad[0])} outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts, list(class_names or []))


# -----------------------------
# Metrics
# -----------------------------
def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    class_accuracy: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted: bool = False
    low_accuracy: List[int] = field(default_factory=list)
    absent: List[int] = field(default_factory=list)

    def summary(self) -> Dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def metrics(cm: ConfusionMatrix, threshold: float = 0.70, weighted: bool = False) -> MetricsReport:
    """
    One-vs-rest precision, recall and F1 per class, averaged without weights
    (or by support with `weighted`). Zero denominators give 0. Per-class
    accuracy is the recall of that class; classes below `threshold` are listed.
    """
    counts = cm.counts.astype(np.float64)
    if counts.sum() <= 0:
        raise InputError("metrics need at least one evaluated sample")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    support = counts.sum(axis=1)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    if weighted:
        w = support / support.sum()
        macro = (float(precision @ w), float(recall @ w), float(f1 @ w))
    else:
        macro = (float(precision.mean()), float(recall.mean()), float(f1.mean()))
    absent = [int(c) for c in np.flatnonzero(support == 0)]
    low = [int(c) for c in np.flatnonzero((recall < threshold) & (support > 0))]
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.astype(np.int64),
        class_accuracy=recall,
        accuracy=float(tp.sum() / counts.sum()),
        macro_precision=macro[0],
        macro_recall=macro[1],
        macro_f1=macro[2],
        weighted=weighted,
        low_accuracy=low,
        absent=absent,
    )


def metrics_table(report: MetricsReport, class_names: Sequence[str]) -> str:
    rows = [
        [name, report.precision[c], report.recall[c], report.f1[c], int(report.support[c])]
        for c, name in enumerate(class_names)
    ]
    avg = "weighted" if report.weighted else "macro"
    rows.append([avg, report.macro_precision, report.macro_recall, report.macro_f1, int(report.support.sum())])
    rows.append(["accuracy", "", "", report.accuracy, int(report.support.sum())])
    return tabulate(rows, headers=["class", "precision", "recall", "f1", "support"], tablefmt="orgtbl", floatfmt=".4f")


def write_metrics_csv(report: MetricsReport, class_names: Sequence[str], path: PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "class": list(class_names),
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "support": report.support,
        }
    )
    avg = "weighted" if report.weighted else "macro"
    total = int(report.support.sum())
    extra = pd.DataFrame(
        [
            {"class": avg, "precision": report.macro_precision, "recall": report.macro_recall, "f1": report.macro_f1, "support": total},
            {"class": "accuracy", "precision": report.accuracy, "recall": report.accuracy, "f1": report.accuracy, "support": total},
        ]
    )
    pd.concat([frame, extra], ignore_index=True).to_csv(p, index=False)
    return p


def write_class_accuracy_csv(report: MetricsReport, class_names: Sequence[str], path: PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        {"class": list(class_names), "accuracy": report.class_accuracy, "support": report.support}
    ).to_csv(p, index=False)
    return p


def log_report(report: MetricsReport, class_names: Sequence[str], threshold: float) -> None:
    logger.info("[eval] per-class metrics\n" + metrics_table(report, class_names))
    if report.low_accuracy:
        names = ", ".join(class_names[c] for c in report.low_accuracy)
        logger.info(f"[eval] {len(report.low_accuracy)} classes below {threshold:.2f} accuracy: {names}")
    if report.absent:
        logger.warning(f"[eval] {len(report.absent)} classes have no test samples; their scores are 0")


# -----------------------------
# Confusion-matrix export
# -----------------------------
def confusion_matrix_export(cm: ConfusionMatrix, csv_path: PathLike, image_path: PathLike) -> None:
    """Raw counts as CSV and log1p(counts), min-max scaled, as an 8-bit grayscale image."""
    names = cm.names()
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(cm.counts, index=names, columns=names).to_csv(csv_path, index_label="true\\pred")
    save_gray(image_path, minmax(np.log1p(cm.counts.astype(np.float64)), flat_value=0.0))


def read_confusion_csv(path: PathLike) -> ConfusionMatrix:
    frame = pd.read_csv(path, index_col=0)
    return ConfusionMatrix(frame.to_numpy(dtype=np.int64), [str(c) for c in frame.columns])


def minmax(values: np.ndarray, flat_value: float = 0.5) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12:
        return np.full(values.shape, flat_value)
    return (values - lo) / (hi - lo)


# -----------------------------
# Linear CKA
# -----------------------------
def _no_variance(raw: np.ndarray, centered: np.ndarray, rtol: float = 1e-12) -> bool:
    scale = float(np.abs(raw).max()) if raw.size else 0.0
    return scale == 0.0 or float(np.abs(centered).max()) <= rtol * scale


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F) on column-centered features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"linear CKA needs n×p1 and n×p2 features, got {x.shape} and {y.shape}")
    if x.shape[0] < 3:
        raise InputError(f"linear CKA needs at least 3 samples, got {x.shape[0]}")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    # relative to the feature magnitude, so rescaled features keep their verdict
    if _no_variance(x, xc) or _no_variance(y, yc):
        raise UndefinedSimilarityError("linear CKA is undefined for zero-variance features")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)))


def block_features(model: VitModel, images: np.ndarray, batch_size: int = 32) -> List[np.ndarray]:
    """Per block, the token-mean of its output for every image (n×D each)."""
    per_block: List[List[np.ndarray]] = [[] for _ in model.blocks]
    with no_grad():
        for start in range(0, len(images), batch_size):
            feats = model.forward_features(images[start : start + batch_size], capture=True)
            for i, tokens in enumerate(feats.per_block_tokens):
                per_block[i].append(tokens.data.mean(axis=1))
    return [np.concatenate(chunks, axis=0) for chunks in per_block]


def cka_heatmap(model_a: VitModel, model_b: VitModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    feats_a = block_features(model_a, images, batch_size)
    feats_b = feats_a if model_b is model_a else block_features(model_b, images, batch_size)
    heat = np.array([[linear_cka(fa, fb) for fb in feats_b] for fa in feats_a])
    logger.debug(f"[cka] {heat.shape[0]}×{heat.shape[1]} heatmap over {len(images)} images")
    return heat


def write_cka_csv(heat: np.ndarray, num_images: int, path: PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    rows = [(i, j, float(heat[i, j])) for i in range(heat.shape[0]) for j in range(heat.shape[1])]
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(f"# images={num_images}\n")
        pd.DataFrame(rows, columns=["block_i", "block_j", "value"]).to_csv(fh, index=False)
    return p


# -----------------------------
# Attention maps
# -----------------------------
def attention_maps(model: VitModel, image: np.ndarray) -> np.ndarray:
    """
    heads × grid × grid maps from the last block: attention each patch receives,
    averaged over queries and min-max normalized (a flat map becomes 0.5).
    """
    grid = model.config.grid_size
    with no_grad():
        feats = model.forward_features(np.asarray(image)[None], capture=True)
    attn = feats.last_attention.data[0]
    received = attn.mean(axis=1)
    return np.stack([minmax(h.reshape(grid, grid)) for h in received])


def overlay(image: np.ndarray, attention: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Blend a grid map (nearest-upsampled to the image) over the image in red."""
    h, w = image.shape[:2]
    gh, gw = attention.shape
    up = np.kron(attention, np.ones((h // gh, w // gw)))
    heat = np.zeros_like(image)
    heat[..., 0] = up
    return np.clip((1.0 - alpha) * image + alpha * heat, 0.0, 1.0)


def export_attention(maps: np.ndarray, image: np.ndarray, out_dir: PathLike, stem: str = "attn") -> List[Path]:
    out_dir = Path(out_dir)
    written = []
    for head, m in enumerate(maps):
        written.append(save_gray(out_dir / f"{stem}_head{head:02d}.png", m))
        written.append(save_image(out_dir / f"{stem}_head{head:02d}_overlay.png", overlay(image, m)))
    return written
