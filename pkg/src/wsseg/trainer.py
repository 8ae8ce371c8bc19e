"""Two-stage training loop, evaluation and the desk-scale experiments built on them."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import data_io
from .augment import apply_transform, sample_transform
from .core import LabelMask, PointCloud, TrainConfig, ValidationError, one_hot, sample_level_label
from .data_io import BudgetSplit, MaskScheme, make_rng
from .encoder import EncoderParams, Tape, add_grads, forward, init_params, sgd_step
from .graph import GraphParams, build_graph, knn_weights
from .losses import (LossBreakdown, mil_loss, seg_loss, siamese_loss, smooth_loss, softmax,
                     total_loss)
from .metrics import IoUReport, aggregate, miou, per_class_mean
from .propagate import propagate

log = logging.getLogger(__name__)

# stream ids for make_rng(seed, stream, ...)
_ORDER_STREAM, _AUG_STREAM, _MASK_STREAM = 1, 2, 3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Ablation:
    """Which extra branches join the segmentation loss in stage 2."""

    mil: bool = False
    siamese: bool = False
    smooth: bool = False

    @classmethod
    def all(cls) -> "Ablation":
        return cls(True, True, True)


@dataclass(eq=False)
class RunRecord:
    losses: List[LossBreakdown]
    params: EncoderParams
    config: TrainConfig
    ablation: Ablation
    evaluation: Optional["Evaluation"] = None
    wall_time: float = 0.0


@dataclass(eq=False)
class Evaluation:
    cat_avg: float
    samp_avg: float
    per_class: list
    reports: List[IoUReport]
    predictions: List[np.ndarray] = field(default_factory=list)

    def metrics(self) -> dict:
        acc = [r.overall_accuracy for r in self.reports]
        return {"cat_avg": self.cat_avg, "samp_avg": self.samp_avg, "per_class": self.per_class,
                "overall_accuracy": float(np.mean(acc)), "num_samples": len(self.reports)}


def graph_params(config: TrainConfig) -> GraphParams:
    return GraphParams(k=config.k, eta=config.eta, symmetrize=config.symmetrize)


def _batches(order: np.ndarray, size: int):
    for s in range(0, len(order), size):
        yield sorted(order[s:s + size].tolist())


class _Trainer:
    def __init__(self, samples, config: TrainConfig, ablation: Ablation):
        self.clouds = [c for c, _ in samples]
        self.masks = [m for _, m in samples]
        self.config = config
        self.ablation = ablation
        k = self.clouds[0].num_classes
        self.onehots = [one_hot(c.labels, k) for c in self.clouds]
        self.present = [sample_level_label(o, m) if m.count else None
                        for o, m in zip(self.onehots, self.masks)]
        self.graphs = {}

    def graph(self, i):
        # static given xyz/rgb/mask, so built once per sample
        if i not in self.graphs:
            m = self.masks[i]
            self.graphs[i] = build_graph(self.clouds[i], graph_params(self.config),
                                         m if m.count >= 2 and self.config.link_constraints else None)
        return self.graphs[i]

    def sample_step(self, params, i, epoch, stage2, c_total, nb, nb_mil):
        cfg, ab = self.config, self.ablation
        cloud, mask = self.clouds[i], self.masks[i]
        tape = Tape(params)
        z = tape.forward(cloud)
        gz = np.zeros_like(z)
        gz2 = None
        seg = mil = sia = smo = 0.0
        if mask.count:
            seg, g = seg_loss(z, self.onehots[i], mask, c_total)
            gz += g
        if stage2:
            if ab.mil and self.present[i] is not None:
                v, g = mil_loss(z, self.present[i])
                mil = v / nb_mil
                gz += (cfg.lambda_mil / nb_mil) * g
            if ab.smooth:
                v, g = smooth_loss(z, self.graph(i), cfg.smooth_on_softmax)
                smo = v / nb
                gz += (cfg.lambda_smo / nb) * g
            if ab.siamese:
                t = sample_transform(make_rng(cfg.seed, _AUG_STREAM, epoch, i))
                z2 = tape.forward(apply_transform(cloud, t))
                v, ga, gb = siamese_loss(z, z2)
                sia = v / nb
                gz += (cfg.lambda_sia / nb) * ga
                gz2 = (cfg.lambda_sia / nb) * gb
                if cfg.seg_on_augmented and mask.count:
                    v, g = seg_loss(z2, self.onehots[i], mask, c_total)
                    seg += v
                    gz2 += g
        parts = (seg, mil, sia, smo)
        if not all(math.isfinite(v) for v in parts):
            raise TrainingError(f"non-finite loss at epoch {epoch}, sample {i}: {parts}")
        grads = tape.backward([gz] if len(tape) == 1 else [gz, gz2])
        return grads, parts


def train(samples: Sequence[Tuple[PointCloud, LabelMask]], config: TrainConfig,
          ablation: Ablation = Ablation(), threads: int = 1,
          init: Optional[EncoderParams] = None, on_epoch=None) -> RunRecord:
    """Stage 1: seg loss only for ``epochs_stage1``; stage 2: the weighted total loss.

    Per-sample gradients may be computed on ``threads`` workers; they are always
    summed in sample-id order, so results do not depend on the thread count.
    """
    if not samples:
        raise ValidationError("no training samples")
    clouds = [c for c, _ in samples]
    if len({c.num_classes for c in clouds}) != 1 or len({c.num_features for c in clouds}) != 1:
        raise ValidationError("all samples must share K and the feature count")
    for c, m in samples:
        if m.flags.size != c.n:
            raise ValidationError("mask length does not match its cloud")
    if all(m.count == 0 for _, m in samples):
        raise ValidationError("no labelled points in the training set")
    start = time.perf_counter()
    cfg = config
    params = init.copy() if init is not None else init_params(
        cfg.seed, clouds[0].num_features, clouds[0].num_classes, cfg.encoder_dims)
    tr = _Trainer(samples, cfg, ablation)
    order_rng = make_rng(cfg.seed, _ORDER_STREAM)
    history = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(cfg.epochs_stage1 + cfg.epochs_stage2):
            stage2 = epoch >= cfg.epochs_stage1
            sums = np.zeros(4)
            nbatches = 0
            for batch in _batches(order_rng.permutation(len(samples)), cfg.batch_size):
                if not stage2 or not (ablation.mil or ablation.siamese or ablation.smooth):
                    batch = [i for i in batch if tr.masks[i].count]
                if not batch:
                    continue
                c_total = sum(tr.masks[i].count for i in batch)
                if stage2 and cfg.seg_on_augmented and ablation.siamese:
                    c_total *= 2
                nb = len(batch)
                nb_mil = max(1, sum(1 for i in batch if tr.present[i] is not None))

                def step(i, params=params):
                    return tr.sample_step(params, i, epoch, stage2, c_total or 1, nb, nb_mil)

                results = list(pool.map(step, batch)) if pool else [step(i) for i in batch]
                grads = results[0][0]
                for g, _ in results[1:]:
                    grads = add_grads(grads, g)
                parts = np.sum([p for _, p in results], axis=0)
                params = sgd_step(params, grads, cfg.lr)
                sums += parts
                nbatches += 1
            parts = sums / max(nbatches, 1)
            lam = cfg if stage2 else cfg.replace(lambda_mil=0.0, lambda_sia=0.0, lambda_smo=0.0)
            rec = total_loss(*parts, lam)
            history.append(rec)
            if on_epoch:
                on_epoch(epoch, rec)
    finally:
        if pool:
            pool.shutdown()
    return RunRecord(history, params, cfg, ablation, None, time.perf_counter() - start)


def predict(params: EncoderParams, cloud: PointCloud, config: TrainConfig,
            use_propagation: bool) -> np.ndarray:
    z = forward(params, cloud)
    if not use_propagation:
        return np.argmax(z, axis=1)
    g = knn_weights(cloud, graph_params(config))
    return propagate(z, g, config.gamma).predicted


def evaluate(params: EncoderParams, clouds: Sequence[PointCloud], config: TrainConfig,
             use_propagation: bool = False, absent_class_policy: str = "exclude") -> Evaluation:
    reports, preds = [], []
    for cloud in clouds:
        pred = predict(params, cloud, config, use_propagation)
        preds.append(pred)
        reports.append(miou(pred, cloud.labels, cloud.num_classes, absent_class_policy))
    cat_avg, samp_avg = aggregate(zip([c.category for c in clouds], reports))
    return Evaluation(cat_avg, samp_avg, per_class_mean(reports), reports, preds)


def evaluate_logits(logits: Sequence[np.ndarray], clouds: Sequence[PointCloud], config: TrainConfig,
                    use_propagation: bool, graphs=None) -> Evaluation:
    """Score precomputed logits, optionally after propagation on the given (or inference) graphs."""
    reports, preds = [], []
    for j, (z, cloud) in enumerate(zip(logits, clouds)):
        if use_propagation:
            g = graphs[j] if graphs is not None else knn_weights(cloud, graph_params(config))
            pred = propagate(z, g, config.gamma).predicted
        else:
            pred = np.argmax(z, axis=1)
        preds.append(pred)
        reports.append(miou(pred, cloud.labels, cloud.num_classes))
    cat_avg, samp_avg = aggregate(zip([c.category for c in clouds], reports))
    return Evaluation(cat_avg, samp_avg, per_class_mean(reports), reports, preds)


# ---------------------------------------------------------------- experiments

def run_setting(train_clouds: Sequence[PointCloud], test_clouds: Sequence[PointCloud],
                masks: Sequence[LabelMask], config: TrainConfig, ours: bool,
                threads: int = 1) -> Evaluation:
    """Baseline (seg loss, plain argmax) or the full method (all losses + propagation)."""
    ablation = Ablation.all() if ours else Ablation()
    record = train(list(zip(train_clouds, masks)), config, ablation, threads)
    return evaluate(record.params, test_clouds, config, use_propagation=ours)


def budget_experiment(dataset: Sequence[PointCloud], test: Sequence[PointCloud], total_budget: float,
                      splits: Sequence[BudgetSplit], config: TrainConfig,
                      ablation: Ablation = Ablation(), threads: int = 1) -> List[dict]:
    """One run per split, all with the same seeds; rows of (split, cat_avg, samp_avg)."""
    for s in splits:
        if abs(s.budget - total_budget) > 1e-9:
            raise ValidationError(
                f"split {s.sample_fraction}:{s.point_fraction} spends {s.budget:g}, not {total_budget:g}")
    rows = []
    for s in splits:
        samples = data_io.split_budget(dataset, s, make_rng(config.seed, _MASK_STREAM).integers(2**63))
        record = train(samples, config, ablation, threads)
        ev = evaluate(record.params, test, config, use_propagation=False)
        labelled = sum(m.count for _, m in samples)
        rows.append({"sample_fraction": s.sample_fraction, "point_fraction": s.point_fraction,
                     "labelled_points": labelled, "cat_avg": ev.cat_avg, "samp_avg": ev.samp_avg})
    return rows


def label_amount_sweep(dataset: Sequence[PointCloud], test: Sequence[PointCloud],
                       fractions: Sequence[float], config: TrainConfig, threads: int = 1) -> List[dict]:
    """Baseline (seg loss only) run per labelled fraction."""
    rows = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValidationError(f"fraction must lie in (0, 1], got {f}")
        masks = data_io.sample_masks(dataset, MaskScheme("fraction", f),
                                     make_rng(config.seed, _MASK_STREAM).integers(2**63))
        ev = run_setting(dataset, test, masks, config, ours=False, threads=threads)
        rows.append({"fraction": f, "cat_avg": ev.cat_avg, "samp_avg": ev.samp_avg})
    return rows


@dataclass(eq=False)
class GradStudyResult:
    grid: np.ndarray
    variances: np.ndarray
    slope: float
    intercept: float
    slope_se: float
    draws: int
    population: int


def grad_study(clouds: Sequence[PointCloud], params: EncoderParams, grid: Sequence[int],
               draws_per_n: int = 30, seed=0, bootstrap: int = 200) -> GradStudyResult:
    """Variance of (masked-mean gradient - full-mean gradient) of the seg loss vs. label count.

    Masks of size n are drawn uniformly without replacement over all points of
    ``clouds`` pooled together. The variance is taken per parameter over the draws
    and averaged over parameters; the slope is a least-squares fit in log-log space
    over the grid points with nonzero variance. ``slope_se`` is a bootstrap over draws.
    """
    grid = np.asarray(sorted(int(n) for n in grid))
    if grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 1:
        raise ValidationError("grid must be distinct positive label counts")
    if draws_per_n < 2:
        raise ValidationError("need at least 2 draws per label count")
    sizes = [c.n for c in clouds]
    total = sum(sizes)
    if grid[-1] > total:
        raise ValidationError(f"label count {grid[-1]} exceeds the {total} available points")
    offsets = np.cumsum([0] + sizes)
    tapes, errs = [], []
    for c in clouds:
        tape = Tape(params)
        z = tape.forward(c)
        tapes.append(tape)
        errs.append(softmax(z) - one_hot(c.labels, c.num_classes))

    def masked_grad(flags: np.ndarray, n: int) -> np.ndarray:
        acc = None
        for b, tape in enumerate(tapes):
            f = flags[offsets[b]:offsets[b + 1]]
            if not f.any():
                continue
            g = tape.backward([errs[b] * (f[:, None] / n)])
            acc = g if acc is None else add_grads(acc, g)
        return acc.flat()

    full = masked_grad(np.ones(total, dtype=bool), total)
    rng = make_rng(seed)
    boot_rng = make_rng(seed, 1)
    variances = np.empty(grid.size)
    boot = np.empty((bootstrap, grid.size))
    for j, n in enumerate(grid):
        diffs = np.empty((draws_per_n, full.size))
        for d in range(draws_per_n):
            flags = np.zeros(total, dtype=bool)
            flags[rng.choice(total, size=n, replace=False)] = True
            diffs[d] = masked_grad(flags, n) - full
        variances[j] = diffs.var(axis=0, ddof=1).mean()
        if bootstrap:
            w = boot_rng.multinomial(draws_per_n, np.full(draws_per_n, 1.0 / draws_per_n), size=bootstrap)
            s1 = w @ diffs
            s2 = w @ (diffs ** 2)
            mean = s1 / draws_per_n
            boot[:, j] = ((s2 - draws_per_n * mean ** 2) / (draws_per_n - 1)).mean(axis=1)
    fit = variances > 0
    slope = intercept = se = float("nan")
    if fit.sum() >= 2:
        x = np.log(grid[fit])
        slope, intercept = (float(v) for v in np.polyfit(x, np.log(variances[fit]), 1))
        if bootstrap:
            bs = boot[:, fit]
            ok = np.all(bs > 0, axis=1)
            slopes = [np.polyfit(x, np.log(row), 1)[0] for row in bs[ok]]
            se = float(np.std(slopes, ddof=1)) if len(slopes) > 1 else float("nan")
    return GradStudyResult(grid, variances, slope, intercept, se, draws_per_n, total)


# ---------------------------------------------------------------- run directory

def write_losses_csv(path, losses: Sequence[LossBreakdown]) -> None:
    lines = ["epoch,seg,mil,sia,smo,total"]
    for e, rec in enumerate(losses):
        lines.append(",".join([str(e)] + [repr(float(v)) for v in rec.as_row()]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_run(record: RunRecord, out_dir, extra_files: Sequence[str] = ()) -> Path:
    """config.txt, losses.csv, checkpoint.txt, metrics.json and a manifest of them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ab = record.ablation
    cfg_text = record.config.to_text() + f"mil = {ab.mil}\nsiamese = {ab.siamese}\nsmooth = {ab.smooth}\n"
    (out / "config.txt").write_text(cfg_text, encoding="utf-8")
    write_losses_csv(out / "losses.csv", record.losses)
    record.params.save(out / "checkpoint.txt")
    files = ["config.txt", "losses.csv", "checkpoint.txt"]
    if record.evaluation is not None:
        data_io.write_metrics(out / "metrics.json", record.evaluation.metrics())
        files.append("metrics.json")
    files += list(extra_files)
    (out / "manifest.txt").write_text("\n".join(files) + "\n", encoding="utf-8")
    return out
