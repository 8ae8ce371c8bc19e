"""Per-sample mIoU, best-permutation matching for clusterings, and CatAvg/SampAvg."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ValidationError

POLICIES = ("exclude", "score_one")


@dataclass(frozen=True, eq=False)
class IoUReport:
    per_class: np.ndarray  # NaN where a class is excluded from the mean
    sample_miou: float
    permutation: Optional[np.ndarray] = None  # predicted id -> ground-truth class
    overall_accuracy: float = float("nan")


def _check(pred, gt, K):
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction has {pred.size} points, ground truth {gt.size}")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= K):
            raise ValidationError(f"{name} label outside 0..{K - 1}")
    return pred, gt


def iou_matrix(pred, gt, K: int) -> np.ndarray:
    """M[a, b] = IoU(pred == a, gt == b); 0 where both are empty."""
    conf = np.zeros((K, K))
    np.add.at(conf, (pred, gt), 1.0)
    union = conf.sum(axis=1)[:, None] + conf.sum(axis=0)[None, :] - conf
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, conf / union, 0.0)


def miou(pred, gt, K: int, absent_class_policy: str = "exclude") -> IoUReport:
    if absent_class_policy not in POLICIES:
        raise ValidationError(f"absent_class_policy must be one of {POLICIES}")
    pred, gt = _check(pred, gt, K)
    per = np.full(K, np.nan)
    for k in range(K):
        p, g = pred == k, gt == k
        union = np.count_nonzero(p | g)
        if union:
            per[k] = np.count_nonzero(p & g) / union
        elif absent_class_policy == "score_one":
            per[k] = 1.0
    acc = float(np.mean(pred == gt)) if pred.size else float("nan")
    return IoUReport(per, float(np.nanmean(per)), None, acc)


def best_permutation_miou(pred, gt, K: int, absent_class_policy: str = "exclude") -> IoUReport:
    """Relabel predicted ids by the assignment maximizing total IoU, then score."""
    pred, gt = _check(pred, gt, K)
    m = iou_matrix(pred, gt, K)
    used = np.unique(pred)
    gt_present = set(np.unique(gt).tolist())
    rows, cols = linear_sum_assignment(-m[used])
    perm = np.full(K, -1, dtype=np.int64)
    perm[used[rows]] = cols
    # a used id parked on a class absent from gt scores 0 there; move it onto a free
    # gt class (also 0 by optimality) so it does not inflate the union of classes
    free = sorted(gt_present - set(perm[used].tolist()))
    for a in used:
        if perm[a] not in gt_present and free:
            perm[a] = free.pop(0)
    taken = set(perm[perm >= 0].tolist())
    remaining = [c for c in range(K) if c not in taken]
    for a in range(K):
        if perm[a] < 0:
            target = a if a in remaining else remaining[0]
            remaining.remove(target)
            perm[a] = target
    rep = miou(perm[pred], gt, K, absent_class_policy)
    return IoUReport(rep.per_class, rep.sample_miou, perm, rep.overall_accuracy)


def aggregate(reports: Iterable[Tuple[str, IoUReport]]) -> Tuple[float, float]:
    """(cat_avg, samp_avg): mean over categories of per-category means, and mean over samples."""
    groups: "OrderedDict[str, list]" = OrderedDict()
    all_ = []
    for cat, rep in reports:
        groups.setdefault(cat, []).append(rep.sample_miou)
        all_.append(rep.sample_miou)
    if not all_:
        raise ValidationError("nothing to aggregate")
    cat_avg = float(np.mean([np.mean(v) for v in groups.values()]))
    return cat_avg, float(np.mean(all_))


def per_class_mean(reports: Sequence[IoUReport]) -> list:
    """Mean IoU per class over the samples where the class counted; None if never."""
    stack = np.array([r.per_class for r in reports])
    out = []
    for col in stack.T:
        vals = col[~np.isnan(col)]
        out.append(float(vals.mean()) if vals.size else None)
    return out
