"""Pixel-level IoU, F-score and AUPR, accumulated over an evaluation set."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

THRESHOLD = 0.5
MAX_AUPR_PIXELS = 10_000_000


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class EvalAccumulator:
    """Running confusion counts (probability > threshold) plus every (score, label) pair.

    Accumulators merge like a monoid; merging shards equals a single pass.
    """

    num_classes: int
    threshold: float = THRESHOLD
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    scores: list[list[np.ndarray]] = field(default=None, repr=False)
    labels: list[list[np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        k = self.num_classes
        if self.tp is None:
            self.tp = np.zeros(k, dtype=np.int64)
            self.fp = np.zeros(k, dtype=np.int64)
            self.fn = np.zeros(k, dtype=np.int64)
        if self.scores is None:
            self.scores = [[] for _ in range(k)]
            self.labels = [[] for _ in range(k)]

    def update(self, probs: np.ndarray, target: np.ndarray) -> None:
        """Add one image (K x H x W) or a batch (N x K x H x W)."""
        probs = np.asarray(probs)
        target = np.asarray(target)
        if probs.shape != target.shape:
            raise ValueError(f"prediction {probs.shape} and target {target.shape} differ")
        if probs.ndim == 3:
            probs, target = probs[None], target[None]
        if probs.shape[1] != self.num_classes:
            raise ValueError(f"expected {self.num_classes} classes, got {probs.shape[1]}")
        pred = probs > self.threshold
        gt = target > 0.5
        self.tp += (pred & gt).sum(axis=(0, 2, 3))
        self.fp += (pred & ~gt).sum(axis=(0, 2, 3))
        self.fn += (~pred & gt).sum(axis=(0, 2, 3))
        for k in range(self.num_classes):
            self.scores[k].append(probs[:, k].astype(np.float32).ravel())
            self.labels[k].append(gt[:, k].ravel())

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        if other.num_classes != self.num_classes or other.threshold != self.threshold:
            raise ValueError("cannot merge accumulators with different settings")
        return EvalAccumulator(
            self.num_classes,
            self.threshold,
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            [a + b for a, b in zip(self.scores, other.scores)],
            [a + b for a, b in zip(self.labels, other.labels)],
        )

    def pairs(self, cls: int) -> tuple[np.ndarray, np.ndarray]:
        self._check(cls)
        if not self.scores[cls]:
            return np.zeros(0, np.float32), np.zeros(0, bool)
        return np.concatenate(self.scores[cls]), np.concatenate(self.labels[cls])

    def _check(self, cls: int) -> None:
        if not 0 <= cls < self.num_classes:
            raise IndexError(f"unknown class index {cls}")


def iou(acc: EvalAccumulator, cls: int) -> float:
    acc._check(cls)
    tp, fp, fn = int(acc.tp[cls]), int(acc.fp[cls]), int(acc.fn[cls])
    return _ratio(tp, tp + fp + fn)


def fscore(acc: EvalAccumulator, cls: int) -> float:
    acc._check(cls)
    tp, fp, fn = int(acc.tp[cls]), int(acc.fp[cls]), int(acc.fn[cls])
    return _ratio(2 * tp, 2 * tp + fp + fn)


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision and recall at every distinct score, thresholds descending.

    A pixel is predicted positive when its score is >= the threshold, so
    tied scores enter the curve together.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    positives = int(labels.sum())
    if positives == 0:
        raise ValueError("AUPR undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(labels[order], dtype=np.int64)[last_of_group]
    predicted = np.arange(1, s.size + 1, dtype=np.int64)[last_of_group]
    return s[last_of_group], tp / predicted, tp / positives


def aupr(scores, labels=None) -> float:
    """Step-integrated area under the precision-recall curve.

    Accepts parallel ``scores``/``labels`` sequences or a single sequence of
    ``(score, label)`` pairs.
    """
    if labels is None:
        pairs = np.asarray(scores, dtype=np.float64).reshape(-1, 2)
        scores, labels = pairs[:, 0], pairs[:, 1]
    _, precision, recall = pr_curve(scores, labels)
    d_recall = np.diff(recall, prepend=0.0)
    return math.fsum((precision * d_recall).tolist())


def _class_aupr(acc: EvalAccumulator, cls: int, max_pixels: int, seed: int) -> tuple[float, int]:
    s, lab = acc.pairs(cls)
    if s.size > max_pixels:
        keep = np.sort(np.random.default_rng(seed).choice(s.size, max_pixels, replace=False))
        s, lab = s[keep], lab[keep]
    if not lab.any():
        return float("nan"), int(s.size)
    return aupr(s, lab), int(s.size)


def summarize(acc: EvalAccumulator, max_pixels: int = MAX_AUPR_PIXELS, seed: int = 0) -> dict:
    """Per-class IoU/F/AUPR plus unweighted means.

    Classes without any positive pixel get AUPR = nan and are left out of
    mAUPR.
    """
    per_class = []
    for k in range(acc.num_classes):
        ap, n = _class_aupr(acc, k, max_pixels, seed)
        per_class.append({"IoU": iou(acc, k), "F": fscore(acc, k), "AUPR": ap, "pixels": n})
    aps = [c["AUPR"] for c in per_class if not math.isnan(c["AUPR"])]
    return {
        "classes": per_class,
        "mIoU": float(np.mean([c["IoU"] for c in per_class])),
        "mF": float(np.mean([c["F"] for c in per_class])),
        "mAUPR": float(np.mean(aps)) if aps else float("nan"),
    }


def write_metrics_csv(path: str | Path, summary: dict, class_names=None, header: str = "") -> None:
    names = class_names or [str(k) for k in range(len(summary["classes"]))]
    with open(path, "w", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.writer(f)
        w.writerow(["class", "IoU", "F", "AUPR"])
        for name, c in zip(names, summary["classes"]):
            w.writerow([name, repr(c["IoU"]), repr(c["F"]), repr(c["AUPR"])])
        w.writerow(["mean", repr(summary["mIoU"]), repr(summary["mF"]), repr(summary["mAUPR"])])


def write_pr_curve_csv(path: str | Path, scores, labels, header: str = "", max_points: int = 2000) -> None:
    """Write (threshold, precision, recall); long curves are thinned evenly."""
    thr, prec, rec = pr_curve(scores, labels)
    if thr.size > max_points:
        idx = np.unique(np.r_[np.linspace(0, thr.size - 1, max_points).astype(np.int64), thr.size - 1])
        thr, prec, rec = thr[idx], prec[idx], rec[idx]
    with open(path, "w", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.writer(f)
        w.writerow(["threshold", "precision", "recall"])
        for row in zip(thr.tolist(), prec.tolist(), rec.tolist()):
            w.writerow([repr(v) for v in row])
