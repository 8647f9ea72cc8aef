"""Confusion matrices and segmentation scores."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, EmptyInputError


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # K x K, rows = truth, cols = prediction
    labels: tuple  # label id of each row/column

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise DataError("cannot add confusion matrices over different label lists")
        return ConfusionMatrix(self.counts + other.counts, self.labels)


def confusion(pred, truth, K: int, labels: Optional[Sequence[int]] = None) -> ConfusionMatrix:
    """Count (truth, prediction) pairs of class indices in ``0..K-1``."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise DataError(f"prediction length {pred.size} != truth length {truth.size}")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise DataError(f"{name} label out of range 0..{K - 1}")
    counts = np.bincount(truth * K + pred, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(counts, tuple(range(K)) if labels is None else tuple(labels))


def confusion_ids(pred_ids, truth_ids, label_ids: Sequence[int]) -> ConfusionMatrix:
    """Same as :func:`confusion` but over arbitrary node ids."""
    lut = {int(n): i for i, n in enumerate(label_ids)}
    try:
        p = [lut[int(x)] for x in np.asarray(pred_ids).reshape(-1)]
        t = [lut[int(x)] for x in np.asarray(truth_ids).reshape(-1)]
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]} is not in the evaluated label list") from None
    return confusion(p, t, len(lut), label_ids)


@dataclass(frozen=True)
class MetricsReport:
    oa: float
    miou: float
    iou: tuple  # per label, NaN where the class never occurs
    n_points: int
    labels: tuple
    names: tuple = ()

    def lines(self) -> list:
        out = [f"points\t{self.n_points}", f"OA\t{self.oa:.6f}", f"mIoU\t{self.miou:.6f}"]
        for i, (lab, v) in enumerate(zip(self.labels, self.iou)):
            name = self.names[i] if i < len(self.names) else str(lab)
            out.append(f"IoU\t{lab}\t{name}\t" + ("absent" if np.isnan(v) else f"{v:.6f}"))
        return out

    def to_json(self) -> str:
        rec = {
            "oa": round(self.oa, 12),
            "miou": round(self.miou, 12),
            "iou": [None if np.isnan(v) else round(v, 12) for v in self.iou],
            "n_points": self.n_points,
            "labels": list(self.labels),
        }
        return json.dumps(rec, sort_keys=True)

    def render(self) -> str:
        return "\n".join(self.lines() + [self.to_json()]) + "\n"


def metrics(cm: ConfusionMatrix, names: Sequence[str] = ()) -> MetricsReport:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise EmptyInputError("no points to evaluate")
    tp = np.diag(c)
    denom = c.sum(0) + c.sum(1) - tp
    iou = np.full(len(tp), np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return MetricsReport(float(tp.sum() / total), float(iou[present].mean()), tuple(float(v) for v in iou),
                         int(total), tuple(int(x) for x in cm.labels), tuple(names))
