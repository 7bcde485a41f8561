"""Segmentation metrics from the point-level confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    overall_accuracy: float
    per_class_iou: np.ndarray  # NaN for classes absent from both sides
    mean_iou: float
    confusion: np.ndarray

    @property
    def defined_classes(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.per_class_iou))


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray,
                     num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal shape")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def compute_metrics(predictions: np.ndarray, labels: np.ndarray,
                    num_classes: int) -> MetricsReport:
    """Overall accuracy, per-class IoU and mIoU.

    IoU_c = TP_c / (TP_c + FP_c + FN_c). A class absent from both prediction
    and ground truth has undefined IoU (NaN) and is excluded from the mean;
    a class present only as false negatives scores 0.
    """
    cm = confusion_matrix(predictions, labels, num_classes)
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(num_classes, np.nan)
    defined = denom > 0
    iou[defined] = tp[defined] / denom[defined]
    mean_iou = float(np.nanmean(iou)) if defined.any() else float("nan")
    return MetricsReport(overall_accuracy=float(tp.sum() / total) if total else float("nan"),
                         per_class_iou=iou, mean_iou=mean_iou, confusion=cm)
