"""Classification and detection metrics.

Malicious is the positive class.  Any rate whose denominator is zero is
reported as ``None`` rather than 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cpsim import box_iou


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def _ratio(num, den):
        return num / den if den else None

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.total)

    @property
    def tpr(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self):
        return self._ratio(self.fp, self.fp + self.tn)

    @property
    def precision(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def f1(self):
        p, r = self.precision, self.tpr
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def rates(self) -> dict:
        return {"accuracy": self.accuracy, "tpr": self.tpr, "fpr": self.fpr,
                "precision": self.precision, "f1": self.f1}


def classification_metrics(verdicts: Sequence, labels: Sequence) -> ConfusionCounts:
    v = np.asarray(verdicts).astype(bool)
    y = np.asarray(labels).astype(bool)
    if v.shape != y.shape:
        raise ValueError(f"{len(v)} verdicts for {len(y)} labels")
    return ConfusionCounts(tp=int(np.sum(v & y)), fp=int(np.sum(v & ~y)),
                           tn=int(np.sum(~v & ~y)), fn=int(np.sum(~v & y)))


def _as_box(p):
    return tuple(p.box) if hasattr(p, "box") else tuple(p[1])


def _conf(p):
    return p.object_score if hasattr(p, "object_score") else float(p[0])


def average_precision(predictions, ground_truth, iou_threshold: float):
    """All-points AP for a single frame; see :func:`average_precision_frames`."""
    return average_precision_frames([predictions], [ground_truth], iou_threshold)


def average_precision_frames(predictions, ground_truth, iou_threshold: float):
    """All-points AP pooled over frames, each matched independently.

    ``predictions[f]`` holds Proposals (or ``(confidence, box)`` pairs) and
    ``ground_truth[f]`` holds boxes as ``(cx, cy, w, h, ...)``.  Detections are
    matched greedily in descending confidence, each ground-truth box at most
    once, and AP is the area under the monotone precision envelope.  Returns
    None when there is no ground truth at all.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different frame counts")
    npos = sum(len(g) for g in ground_truth)
    if npos == 0:
        return None
    flat = [(_conf(p), f, _as_box(p)) for f, preds in enumerate(predictions) for p in preds]
    if not flat:
        return 0.0
    order = sorted(range(len(flat)), key=lambda i: (-flat[i][0], i))
    used = [np.zeros(len(g), dtype=bool) for g in ground_truth]
    tp = np.zeros(len(flat))
    for rank, i in enumerate(order):
        _, f, box = flat[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(ground_truth[f]):
            if used[f][j]:
                continue
            iou = box_iou(box, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_threshold:
            used[f][best_j] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    recall = ctp / npos
    precision = ctp / np.arange(1, len(flat) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class MetricsReport:
    """Structured result of a run.  Missing metrics stay ``None``."""

    accuracy: float | None = None
    tpr: float | None = None
    fpr: float | None = None
    precision: float | None = None
    f1: float | None = None
    ap_050: float | None = None
    ap_070: float | None = None
    fps: float | None = None
    config_digest: str = ""
    per_attack: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, **kw) -> "MetricsReport":
        return cls(**counts.rates(), **kw)

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")
