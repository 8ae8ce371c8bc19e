"""Training objectives. Each loss returns ``(value, d value / d logits)`` for one sample."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import LabelMask, TrainConfig, ValidationError
from .graph import AffinityGraph


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _softmax_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    return p * (gp - (gp * p).sum(axis=1, keepdims=True))


def seg_loss(logits: np.ndarray, onehot: np.ndarray, mask: LabelMask,
             normalizer: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy over the labelled points, divided by the labelled count.

    ``normalizer`` replaces the count when a batch shares one denominator.
    """
    c = mask.count if normalizer is None else normalizer
    if c <= 0:
        raise ValidationError("segmentation loss needs at least one labelled point")
    m = mask.flags
    logp = log_softmax(logits[m])
    value = -float((onehot[m] * logp).sum()) / c
    grad = np.zeros_like(logits)
    grad[m] = (np.exp(logp) - onehot[m]) / c
    return value, grad


def mil_loss(logits: np.ndarray, present: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sigmoid cross-entropy between column-max logits and the sample-level label."""
    n, k = logits.shape
    rows = np.argmax(logits, axis=0)
    pooled = logits[rows, np.arange(k)]
    y = np.asarray(present, dtype=np.float64)
    # -[y log s(z) + (1 - y) log(1 - s(z))] = softplus(z) - y z
    value = float((np.logaddexp(0.0, pooled) - y * pooled).sum()) / k
    sig = np.exp(-np.logaddexp(0.0, -pooled))
    grad = np.zeros_like(logits)
    grad[rows, np.arange(k)] = (sig - y) / k
    return value, grad


def siamese_loss(logits_a: np.ndarray, logits_b: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean squared difference of row-softmax predictions; returns both logit gradients."""
    if logits_a.shape != logits_b.shape:
        raise ValidationError(f"shape mismatch {logits_a.shape} vs {logits_b.shape}")
    pa, pb = softmax(logits_a), softmax(logits_b)
    diff = pa - pb
    scale = 1.0 / diff.size
    value = float((diff ** 2).sum()) * scale
    g = 2.0 * scale * diff
    return value, _softmax_backward(pa, g), _softmax_backward(pb, -g)


def smooth_loss(logits: np.ndarray, graph: AffinityGraph,
                on_softmax: bool = False) -> Tuple[float, np.ndarray]:
    """Manifold regularizer 2 / ||W||_0 * tr(Z^T L Z) on the raw logits (or softmax)."""
    if graph.n != logits.shape[0]:
        raise ValidationError(f"graph has {graph.n} nodes, logits have {logits.shape[0]} rows")
    if graph.nnz == 0:
        warnings.warn("smoothness loss on a graph without edges is 0", RuntimeWarning)
        return 0.0, np.zeros_like(logits)
    z = softmax(logits) if on_softmax else logits
    lap = graph.laplacian
    lz = lap @ z
    scale = 2.0 / graph.nnz
    value = scale * float((z * lz).sum())
    gz = scale * (lz + lap.T @ z)
    if on_softmax:
        gz = _softmax_backward(z, gz)
    return value, gz


@dataclass(frozen=True)
class LossBreakdown:
    seg: float = 0.0
    mil: float = 0.0
    sia: float = 0.0
    smo: float = 0.0
    total: float = 0.0

    def as_row(self):
        return (self.seg, self.mil, self.sia, self.smo, self.total)


def total_loss(seg: float, mil: float, sia: float, smo: float, config: TrainConfig) -> LossBreakdown:
    total = seg + config.lambda_mil * mil + config.lambda_sia * sia + config.lambda_smo * smo
    return LossBreakdown(seg, mil, sia, smo, total)
