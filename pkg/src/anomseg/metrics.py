"""Pixel-level evaluation: exact-threshold-sweep AUROC and average precision,
PR-based threshold selection, Dice with special-cased normal images, anomaly
rate, and a demo of how class imbalance inflates AUROC.

The sweep enumerates every distinct score as a threshold, grouping ties into
one step; prediction at threshold t is score >= t. Degenerate inputs raise
rather than return sentinels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class UndefinedMetricError(ValueError):
    """Metric has no defined value for this input (e.g. one-class truth)."""


@dataclass
class ScoredMask:
    """One image's anomaly scores plus its binary ground truth."""

    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth)
        if self.scores.shape != self.truth.shape:
            raise ValueError(f"scores {self.scores.shape} != truth {self.truth.shape}")
        uniq = np.unique(self.truth)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValueError("truth must be binary")


@dataclass
class CurvePoints:
    """Confusion counts along the exact descending threshold sweep."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)
    fpr: np.ndarray = field(init=False)

    def __post_init__(self):
        self.precision = self.tp / (self.tp + self.fp)
        self.recall = self.tp / (self.tp + self.fn)
        self.fpr = self.fp / (self.fp + self.tn)

    def __len__(self):
        return len(self.thresholds)

    def csv_rows(self):
        yield "threshold,tp,fp,tn,fn,precision,recall,fpr"
        for i in range(len(self.thresholds)):
            yield (f"{self.thresholds[i]!r},{int(self.tp[i])},{int(self.fp[i])},"
                   f"{int(self.tn[i])},{int(self.fn[i])},{self.precision[i]!r},"
                   f"{self.recall[i]!r},{self.fpr[i]!r}")


def _flatten(scores, truth):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth).reshape(-1).astype(np.int64)
    if s.shape != t.shape:
        raise ValueError(f"scores and truth sizes differ: {s.shape} vs {t.shape}")
    return s, t


def pool(masks: list[ScoredMask]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate pixels across images (per-category pooling)."""
    scores = np.concatenate([m.scores.reshape(-1) for m in masks])
    truth = np.concatenate([m.truth.reshape(-1) for m in masks])
    return scores, truth


def sweep_curve(scores, truth) -> CurvePoints:
    """Exact sweep over distinct scores, descending; ties form one step."""
    s, t = _flatten(scores, truth)
    pos = int(t.sum())
    neg = t.size - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(
            f"need both classes: {pos} positive / {neg} negative pixels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    t_sorted = t[order]
    # last index of each tie group
    boundary = np.nonzero(np.diff(s_sorted))[0]
    last = np.concatenate([boundary, [s.size - 1]])
    cum_tp = np.cumsum(t_sorted)
    tp = cum_tp[last].astype(np.float64)
    predicted = (last + 1).astype(np.float64)
    fp = predicted - tp
    fn = pos - tp
    tn = neg - fp
    return CurvePoints(thresholds=s_sorted[last], tp=tp, fp=fp, tn=tn, fn=fn)


def auroc(scores, truth) -> float:
    """Area under TPR vs FPR by trapezoidal integration of the exact sweep."""
    curve = sweep_curve(scores, truth)
    tpr = np.concatenate([[0.0], curve.recall])
    fpr = np.concatenate([[0.0], curve.fpr])
    return float(np.trapezoid(tpr, fpr))


def average_precision(scores, truth) -> float:
    """Step-wise AP: sum over sweep steps of (R_n - R_{n-1}) * P_n."""
    curve = sweep_curve(scores, truth)
    recall = np.concatenate([[0.0], curve.recall])
    return float(np.sum(np.diff(recall) * curve.precision))


def select_threshold(curve: CurvePoints) -> float:
    """Threshold maximizing precision + recall; ties go to the higher one."""
    idx = int(np.argmax(curve.precision + curve.recall))  # thresholds descend
    return float(curve.thresholds[idx])


def dsc(pred_mask, truth_mask) -> float:
    """Dice for one image. Normal images (empty truth): 1 if the prediction
    is empty, else 0."""
    p = np.asarray(pred_mask).astype(bool)
    t = np.asarray(truth_mask).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"pred {p.shape} != truth {t.shape}")
    t_count = int(t.sum())
    p_count = int(p.sum())
    if t_count == 0:
        return 1.0 if p_count == 0 else 0.0
    inter = int(np.logical_and(p, t).sum())
    return 2.0 * inter / (p_count + t_count)


def dataset_dsc(masks: list[ScoredMask], threshold: float) -> tuple[float, list[float]]:
    """Sample-wise Dice at one threshold; returns (mean, per-image list)."""
    per_image = [dsc(m.scores >= threshold, m.truth) for m in masks]
    return float(np.mean(per_image)), per_image


def anomaly_rate(truth_masks) -> float:
    """Fraction of anomalous pixels over all pixels of the given masks."""
    total = 0
    positive = 0
    for m in truth_masks:
        arr = np.asarray(m)
        total += arr.size
        positive += int(np.count_nonzero(arr))
    if total == 0:
        return 0.0
    return positive / total


@dataclass
class CategoryResult:
    auroc: float
    pap: float
    dsc: float
    ar: float
    threshold: float
    per_image_dsc: list[float]

    def summary(self) -> dict:
        return {"auroc": self.auroc, "pap": self.pap, "dsc": self.dsc,
                "ar": self.ar, "threshold": self.threshold,
                "per_image_dsc": self.per_image_dsc}


@dataclass
class EvalReport:
    """Per-category and mean pixel metrics for one evaluation run."""

    categories: dict[str, CategoryResult]
    levels: list[int] | None = None

    def __post_init__(self):
        for name, r in self.categories.items():
            for value in (r.auroc, r.pap, r.dsc, r.ar):
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{name}: metric outside [0,1]")

    def mean(self) -> dict:
        rows = list(self.categories.values())
        return {k: float(np.mean([getattr(r, k) for r in rows]))
                for k in ("auroc", "pap", "dsc", "ar")}

    def to_json(self) -> dict:
        return {"levels": self.levels,
                "categories": {n: r.summary() for n, r in self.categories.items()},
                "mean": self.mean()}


@dataclass
class InflationResult:
    auroc: float
    pap: float
    dsc: float
    threshold: float
    scores: np.ndarray
    mask: np.ndarray
    curve: CurvePoints


def inflation_demo(ar: float, dilation: int, seed: int, size: int = 128) -> InflationResult:
    """Synthetic illustration of AUROC inflation under class imbalance.

    Ground truth is a disk covering ~ar of the field; the "prediction" scores
    the disk dilated by `dilation` pixels high (simulating blurry upsampled
    output), so every dilated pixel outranks the background noise.
    """
    if not 0.0 < ar < 1.0:
        raise ValueError(f"anomaly rate must be in (0,1), got {ar}")
    gen = np.random.Generator(np.random.PCG64(seed))
    area = ar * size * size
    radius = float(np.sqrt(area / np.pi))
    if 2 * radius > size - 2:
        raise ValueError(f"anomaly rate {ar} infeasible at size {size}")
    margin = int(np.ceil(radius)) + 1
    cy = gen.uniform(margin, size - margin)
    cx = gen.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    mask = (dist <= radius).astype(np.uint8)

    if dilation > 0:
        hot = ndimage.distance_transform_edt(1 - mask) <= dilation
    else:
        hot = mask.astype(bool)
    scores = 0.4 * gen.random(size=(size, size))
    scores[hot] = 0.7 + 0.3 * gen.random(size=int(hot.sum()))

    curve = sweep_curve(scores, mask)
    thr = select_threshold(curve)
    mean_dice = dsc(scores >= thr, mask)
    return InflationResult(
        auroc=auroc(scores, mask),
        pap=average_precision(scores, mask),
        dsc=mean_dice,
        threshold=thr,
        scores=scores,
        mask=mask,
        curve=curve,
    )
