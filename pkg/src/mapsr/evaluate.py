"""Confusion matrices and IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import NODATA, LabelMap


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def accumulate_confusion(pred: LabelMap, truth: LabelMap, cm: ConfusionMatrix | None = None) -> ConfusionMatrix:
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} are not aligned")
    C = truth.num_classes if cm is None else cm.num_classes
    cm = cm or ConfusionMatrix.empty(C)
    t = truth.data.ravel().astype(np.int64)
    p = pred.data.ravel().astype(np.int64)
    ok = t != NODATA
    if (p[ok] >= C).any():
        raise ValueError("prediction contains classes outside the confusion matrix")
    counts = np.bincount(t[ok] * C + p[ok], minlength=C * C).reshape(C, C)
    return ConfusionMatrix(cm.counts + counts, cm.ignored + int((~ok).sum()))


def iou_per_class(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-class IoU and the union sizes it was computed from (NaN where union is 0)."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(0) + cm.counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou, union


def miou(cm: ConfusionMatrix, absent_as_zero: bool = False) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes with an empty union are left out of the mean unless
    ``absent_as_zero``, in which case they count as 0.
    """
    iou, union = iou_per_class(cm)
    if absent_as_zero:
        return np.nan_to_num(iou, nan=0.0), float(np.nan_to_num(iou, nan=0.0).mean())
    if not (union > 0).any():
        raise ValueError("every class has an empty union; mIoU is undefined")
    return iou, float(np.nanmean(iou))


def score(pred: LabelMap, truth: LabelMap, absent_as_zero: bool = False) -> float:
    return miou(accumulate_confusion(pred, truth), absent_as_zero)[1]


def format_report(cm: ConfusionMatrix, absent_as_zero: bool = False) -> str:
    iou, mean = miou(cm, absent_as_zero)
    lines = ["class  IoU"]
    lines += [f"{c:5d}  {'absent' if np.isnan(v) else f'{v:.4f}'}" for c, v in enumerate(iou)]
    lines.append(f" mean  {mean:.4f}")
    lines += [f"iou.{c}={'nan' if np.isnan(v) else f'{v:.6f}'}" for c, v in enumerate(iou)]
    lines.append(f"miou={mean:.6f}")
    return "\n".join(lines)
