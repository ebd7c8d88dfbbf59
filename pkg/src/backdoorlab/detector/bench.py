"""Wall-clock cost of the attack penalty relative to the whole training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..geometry import iou_matrix
from ..penalty import attack_penalty
from .head import DetectorParams, backward, detection_loss, hidden_features, init_params
from .training import TrainConfig, TrainingSet


@dataclass
class BenchReport:
    batches: int
    batch_size: int
    penalty_ms_mean: float
    penalty_ms_std: float
    total_ms_mean: float
    total_ms_std: float
    share_mean: float
    share_std: float
    pairs_mean: float
    skipped: bool = False
    per_batch: list = field(default_factory=list)  # (pairs, penalty_ms, total_ms, share)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "per_batch"}


def _penalty_block(logits, anchor_boxes, poison_boxes, poison_cols, rho, tau, mode):
    """Gate pairs by IoU and evaluate the penalty; everything the trainer adds for the attack."""
    A = anchor_boxes[0].shape[0] if len(anchor_boxes) else 0
    rows, cols = [], []
    for b, (ab, pb, pc) in enumerate(zip(anchor_boxes, poison_boxes, poison_cols)):
        if len(pb) == 0:
            continue
        g, a = np.nonzero(iou_matrix(pb, ab) > rho)
        rows.append(b * A + a)
        cols.append(pc[g])
    if not rows:
        return 0.0, np.zeros_like(logits), 0
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    value, grad = attack_penalty(logits, rows, cols, tau, mode)
    return value, grad, rows.size


def time_batch(params: DetectorParams, data: TrainingSet, idx, cfg: TrainConfig):
    """``(pairs, penalty_seconds, total_seconds)`` for one minibatch."""
    pen = cfg.penalty_cfg
    t0 = time.perf_counter()
    feats = data.features[idx].reshape(-1, data.features.shape[-1])
    logits = hidden_features(params, feats) @ params.W.T
    det, grad = detection_loss(logits, data.targets[idx].ravel(), cfg.loss_kind)
    pen_time, pairs = 0.0, 0
    if pen.lam > 0:
        p0 = time.perf_counter()
        value, pgrad, pairs = _penalty_block(logits, data.anchor_boxes[idx],
                                             [data.poison_boxes[i] for i in idx],
                                             [data.poison_cols[i] for i in idx],
                                             pen.rho, pen.tau, pen.head_mode)
        grad = grad + pen.lam / len(idx) * pgrad
        pen_time = time.perf_counter() - p0
    backward(params, feats, grad)
    return pairs, pen_time, time.perf_counter() - t0


def benchmark_penalty_overhead(data: TrainingSet, cfg: TrainConfig, batches: int,
                               params: Optional[DetectorParams] = None, batch_size: Optional[int] = None,
                               seed: int = 0) -> BenchReport:
    if batches < 1:
        raise ValueError("batches must be >= 1")
    if data.anchor_boxes is None:
        raise ValueError("benchmark needs anchor boxes in the training set")
    params = params or init_params(data.n_classes, cfg.loss_kind, cfg.extractor, cfg.grid,
                                   cfg.head_depth, cfg.hidden, cfg.seed)
    bs = min(batch_size or cfg.batch_size, len(data))
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(batches):
        idx = np.sort(rng.choice(len(data), size=bs, replace=False))
        pairs, pt, tt = time_batch(params, data, idx, cfg)
        rows.append((pairs, pt * 1e3, tt * 1e3, 100.0 * pt / tt if tt > 0 else 0.0))
    arr = np.array(rows, dtype=float)
    return BenchReport(batches, bs, arr[:, 1].mean(), arr[:, 1].std(), arr[:, 2].mean(), arr[:, 2].std(),
                       arr[:, 3].mean(), arr[:, 3].std(), arr[:, 0].mean(),
                       skipped=cfg.penalty_cfg.lam == 0, per_batch=rows)


@dataclass
class ScalingReport:
    pairs: list[int]
    penalty_ms: list[float]
    slope_ms_per_pair: float
    r2: float


def penalty_scaling(cfg: TrainConfig, densities: Sequence[int] = (200, 400, 600, 800, 1000),
                    batch_size: int = 16, anchors: int = 18, n_outputs: int = 4,
                    repeats: int = 7, seed: int = 0) -> ScalingReport:
    """Penalty time on synthetic batches with ``density`` trigger-bearing boxes per image.

    Each synthetic box coincides with one anchor, so matched pairs grow
    linearly with density. The reported time per point is the minimum over
    ``repeats`` runs, which is the usual way to suppress scheduler noise.
    """
    rng = np.random.default_rng(seed)
    anchor = np.array([[c * 10.0, 0.0, c * 10.0 + 10.0, 10.0] for c in range(anchors)])
    anchor_boxes = np.tile(anchor, (batch_size, 1, 1))
    logits = rng.normal(size=(batch_size * anchors, n_outputs))
    pen = cfg.penalty_cfg
    counts, times = [], []
    for k in densities:
        which = rng.integers(0, anchors, size=(batch_size, k))
        pboxes = [anchor[w] for w in which]
        pcols = [rng.integers(0, n_outputs, size=k) for _ in range(batch_size)]
        best, pairs = np.inf, 0
        for _ in range(repeats):
            t0 = time.perf_counter()
            _, _, pairs = _penalty_block(logits, anchor_boxes, pboxes, pcols, pen.rho, pen.tau, pen.head_mode)
            best = min(best, time.perf_counter() - t0)
        counts.append(int(pairs))
        times.append(best * 1e3)
    x, y = np.array(counts, float), np.array(times)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return ScalingReport(counts, times, float(slope), r2)
