"""Training-set assembly, minibatch SGD on ``L_det + lambda * P``, gradient flow.

Normalisation: the detection loss is a mean over anchors in the batch; the
penalty is summed over matched pairs within each image and divided by the
number of images in the batch.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from ..geometry import iou_matrix
from ..penalty import HeadMode, PenaltyConfig, attack_penalty
from ..poisoning import DatasetManifest
from .features import AnchorGrid, FeatureExtractor, corner_views
from .head import (DetectorParams, LossKind, backward, detection_loss, forward, hidden_features,
                   init_params)

log = logging.getLogger(__name__)


class Assignment(str, enum.Enum):
    ONE_TO_ONE = "one-to-one"
    MULTI = "multi"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    loss_kind: LossKind = field(default_factory=LossKind)
    penalty_cfg: PenaltyConfig = field(default_factory=PenaltyConfig)
    momentum: float = 0.9
    weight_decay: float = 0.0
    assignment: Assignment = Assignment.MULTI
    pos_iou: float = 0.5
    head_depth: int = 2
    hidden: int = 32
    extractor: FeatureExtractor = field(default_factory=lambda: FeatureExtractor(views=corner_views()))
    grid: tuple[int, int] = (3, 3)
    clip_norm: Optional[float] = None  # global gradient-norm cap; None disables

    def __post_init__(self):
        object.__setattr__(self, "assignment", Assignment(self.assignment))
        object.__setattr__(self, "grid", tuple(self.grid))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed,
                "loss_kind": self.loss_kind.to_dict(), "penalty": self.penalty_cfg.to_dict(),
                "momentum": self.momentum, "weight_decay": self.weight_decay, "assignment": self.assignment.value,
                "pos_iou": self.pos_iou, "head_depth": self.head_depth, "hidden": self.hidden,
                "extractor": self.extractor.to_dict(), "grid": list(self.grid),
                "clip_norm": self.clip_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss_kind"] = LossKind.from_dict(d["loss_kind"])
        d["penalty_cfg"] = PenaltyConfig.from_dict(d.pop("penalty"))
        d["extractor"] = FeatureExtractor.from_dict(d["extractor"])
        return cls(**d)


@dataclass
class TrainingSet:
    """Precomputed per-anchor features, targets and penalty pairs.

    ``targets`` uses 1..C for classes, 0 for background, -1 for ignored
    anchors. Pair ``k`` says anchor ``pair_anchor[k]`` of image
    ``pair_img[k]`` overlaps a trigger-bearing object whose original class sits
    in logit column ``pair_col[k]``.
    """

    features: np.ndarray  # (N, A, d)
    targets: np.ndarray  # (N, A)
    pair_img: np.ndarray
    pair_anchor: np.ndarray
    pair_col: np.ndarray
    n_classes: int
    anchor_boxes: Optional[np.ndarray] = None  # (N, A, 4)
    poison_boxes: list = field(default_factory=list)  # per image (k, 4)
    poison_cols: list = field(default_factory=list)  # per image (k,)

    def __len__(self):
        return self.features.shape[0]

    @property
    def anchors_per_image(self) -> int:
        return self.features.shape[1]

    @property
    def n_pairs(self) -> int:
        return int(self.pair_img.size)

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx, dtype=int)
        remap = -np.ones(len(self), dtype=int)
        remap[idx] = np.arange(idx.size)
        keep = remap[self.pair_img] >= 0
        return TrainingSet(self.features[idx], self.targets[idx], remap[self.pair_img[keep]],
                           self.pair_anchor[keep], self.pair_col[keep], self.n_classes,
                           None if self.anchor_boxes is None else self.anchor_boxes[idx],
                           [self.poison_boxes[i] for i in idx] if self.poison_boxes else [],
                           [self.poison_cols[i] for i in idx] if self.poison_cols else [])


def assign_targets(anchor_boxes: np.ndarray, objects, policy: Assignment, pos_iou: float = 0.5,
                   levels: int = 1) -> np.ndarray:
    """Per-anchor training label (0 = background) for one image.

    One-to-one gives each object only its best base-level anchor; multi-match
    gives it every anchor (any view) with IoU >= ``pos_iou``.
    Objects whose ``train_label`` is ``None`` or whose box is degenerate
    contribute nothing, so their anchors stay background.
    """
    n = anchor_boxes.shape[0]
    targets = np.zeros(n, dtype=int)
    live = [o for o in objects if o.train_label is not None and not o.removed and not o.box.degenerate]
    if not live:
        return targets
    ious = iou_matrix(anchor_boxes, np.array([o.box.as_list() for o in live]))
    base = n // levels
    best_iou = np.zeros(n)
    for g, obj in enumerate(live):
        col = ious[:, g]
        if policy is Assignment.ONE_TO_ONE:
            a = int(np.argmax(col[:base]))
            hits = [a] if col[a] >= pos_iou else []
        else:
            hits = np.nonzero(col >= pos_iou)[0].tolist()
        for a in hits:
            if col[a] > best_iou[a]:
                best_iou[a] = col[a]
                targets[a] = obj.train_label
    return targets


def build_training_set(manifest: DatasetManifest, cfg: TrainConfig, n_classes: Optional[int] = None) -> TrainingSet:
    ext, (rows, cols) = cfg.extractor, cfg.grid
    n_classes = n_classes or manifest.n_classes
    offset = int(cfg.loss_kind.background_column)
    rho = cfg.penalty_cfg.rho
    feats, targets, boxes, p_img, p_anchor, p_col, poison_boxes, poison_cols = [], [], [], [], [], [], [], []
    for i, scene in enumerate(manifest.scenes):
        grid = AnchorGrid.for_image(scene.image, rows, cols)
        ab = ext.anchor_boxes(grid)
        feats.append(ext.extract_grid(scene.image, grid))
        boxes.append(ab)
        targets.append(assign_targets(ab, scene.objects, cfg.assignment, cfg.pos_iou, ext.levels))
        pb = [o for o in scene.objects if o.poisoned and not o.removed and not o.box.degenerate]
        pbox = np.array([o.box.as_list() for o in pb]).reshape(-1, 4)
        pcol = np.array([o.original_label - 1 + offset for o in pb], dtype=int)
        poison_boxes.append(pbox)
        poison_cols.append(pcol)
        if pb:
            ious = iou_matrix(pbox, ab)
            g_idx, a_idx = np.nonzero(ious > rho)
            p_img.extend([i] * g_idx.size)
            p_anchor.extend(a_idx.tolist())
            p_col.extend(pcol[g_idx].tolist())
    d = ext.output_dim
    n = len(manifest.scenes)
    return TrainingSet(
        features=np.array(feats).reshape(n, -1, d) if n else np.zeros((0, 0, d)),
        targets=np.array(targets, dtype=int).reshape(n, -1) if n else np.zeros((0, 0), dtype=int),
        pair_img=np.array(p_img, dtype=int), pair_anchor=np.array(p_anchor, dtype=int),
        pair_col=np.array(p_col, dtype=int), n_classes=n_classes,
        anchor_boxes=np.array(boxes).reshape(n, -1, 4) if n else None,
        poison_boxes=poison_boxes, poison_cols=poison_cols)


@dataclass
class BatchLoss:
    det: float
    penalty: float
    grad_logits: np.ndarray

    @property
    def total(self) -> float:
        return self.det + self.penalty


def batch_objective(params: DetectorParams, data: TrainingSet, idx: np.ndarray, loss: LossKind,
                    pen: PenaltyConfig, attack_only: bool = False, hidden=None):
    """Objective on images ``idx``: mean det loss plus ``lam / |idx|`` times the summed penalty.

    Returns ``(BatchLoss, logits)``; ``penalty`` already carries the lambda weight.
    """
    A = data.anchors_per_image
    feats = data.features[idx].reshape(-1, data.features.shape[-1])
    logits = (hidden if hidden is not None else hidden_features(params, feats)) @ params.W.T
    if attack_only:
        det, grad = 0.0, np.zeros_like(logits)
    else:
        det, grad = detection_loss(logits, data.targets[idx].ravel(), loss)
    pen_value = 0.0
    if pen.lam > 0 and data.n_pairs:
        pos = -np.ones(len(data), dtype=int)
        pos[idx] = np.arange(len(idx))
        sel = pos[data.pair_img] >= 0
        if sel.any():
            rows = pos[data.pair_img[sel]] * A + data.pair_anchor[sel]
            value, pgrad = attack_penalty(logits, rows, data.pair_col[sel], pen.tau, pen.head_mode)
            scale = pen.lam / len(idx)
            pen_value = scale * value
            grad = grad + scale * pgrad
    return BatchLoss(det, pen_value, grad), logits


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_params: DetectorParams, trace):
        super().__init__(message)
        self.last_params = last_params
        self.trace = trace


@dataclass
class EpochRecord:
    epoch: int
    det_loss: float
    penalty: float
    total: float


@dataclass
class TrainResult:
    params: DetectorParams
    trace: list[EpochRecord]


def _sgd_step(params: DetectorParams, data: TrainingSet, idx, cfg: TrainConfig, velocity):
    feats = data.features[idx].reshape(-1, data.features.shape[-1])
    h = hidden_features(params, feats)
    bl, _ = batch_objective(params, data, idx, cfg.loss_kind, cfg.penalty_cfg, hidden=h)
    dW, dV = backward(params, feats, bl.grad_logits)
    if cfg.weight_decay:
        dW = dW + cfg.weight_decay * params.W
        if dV is not None:
            dV = dV + cfg.weight_decay * params.V
    if cfg.clip_norm is not None:
        norm = np.sqrt(np.sum(dW ** 2) + (0.0 if dV is None else np.sum(dV ** 2)))
        if norm > cfg.clip_norm:
            dW = dW * (cfg.clip_norm / norm)
            dV = None if dV is None else dV * (cfg.clip_norm / norm)
    velocity[0] = cfg.momentum * velocity[0] - cfg.learning_rate * dW
    params.W += velocity[0]
    if dV is not None:
        velocity[1] = cfg.momentum * velocity[1] - cfg.learning_rate * dV
        params.V += velocity[1]
    return bl


def train(dataset: Union[DatasetManifest, TrainingSet], cfg: TrainConfig,
          init: Optional[DetectorParams] = None) -> TrainResult:
    """Minibatch SGD with momentum; deterministic given ``cfg.seed``."""
    data = build_training_set(dataset, cfg) if isinstance(dataset, DatasetManifest) else dataset
    if len(data) == 0:
        raise ValueError("training set is empty")
    if init is not None:
        params = init.copy()
    else:
        params = init_params(data.n_classes, cfg.loss_kind, cfg.extractor, cfg.grid,
                             cfg.head_depth, cfg.hidden, cfg.seed)
    pen_mode = cfg.penalty_cfg.head_mode
    if pen_mode is HeadMode.SOFTMAX and params.n_outputs < 2:
        raise ValueError("softmax penalty needs at least two logits")
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = [np.zeros_like(params.W), None if params.V is None else np.zeros_like(params.V)]
    trace: list[EpochRecord] = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        last_good = params.copy()
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            bl = _sgd_step(params, data, idx, cfg, velocity)
            if not (np.isfinite(bl.total) and np.all(np.isfinite(params.W))):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", last_good, trace)
            sums += (bl.det, bl.penalty, bl.total)
            batches += 1
        rec = EpochRecord(epoch, *(sums / batches))
        trace.append(rec)
        log.debug("epoch %d det %.5f pen %.5f", epoch, rec.det_loss, rec.penalty)
    return TrainResult(params, trace)


def fine_tune(params: DetectorParams, clean_subset: Union[DatasetManifest, TrainingSet],
              cfg: TrainConfig) -> TrainResult:
    """Continue SGD on clean data with the penalty switched off."""
    if isinstance(clean_subset, DatasetManifest):
        if any(o.poisoned or o.removed for s in clean_subset.scenes for o in s.objects):
            raise ValueError("fine-tuning subset contains poisoned objects")
        ft_cfg = replace(cfg, penalty_cfg=replace(cfg.penalty_cfg, lam=0.0))
        data = build_training_set(clean_subset, ft_cfg, params.n_classes)
    else:
        if clean_subset.n_pairs or any(len(b) for b in clean_subset.poison_boxes):
            raise ValueError("fine-tuning subset contains poisoned objects")
        ft_cfg = replace(cfg, penalty_cfg=replace(cfg.penalty_cfg, lam=0.0))
        data = clean_subset
    if ft_cfg.epochs == 0:
        return TrainResult(params.copy(), [])
    return train(data, ft_cfg, init=params)


# ------------------------------------------------------------- gradient flow


@dataclass
class Trajectory:
    times: np.ndarray  # (S,)
    margins: np.ndarray  # (S, n_pairs): z (independent) or log-odds (softmax)
    weights: list  # W snapshots
    logits: np.ndarray  # (S, n_pairs, K) logits of the paired predictions


def pair_margins(params: DetectorParams, data: TrainingSet, mode: HeadMode):
    from ..penalty import log_odds_columns

    if data.n_pairs == 0:
        return np.zeros(0), np.zeros((0, params.n_outputs))
    h = data.features[data.pair_img, data.pair_anchor]
    z = forward(params, h)
    if mode is HeadMode.INDEPENDENT:
        return z[np.arange(data.n_pairs), data.pair_col], z
    ell, _ = log_odds_columns(z, np.arange(data.n_pairs), data.pair_col)
    return ell, z


def full_gradient(params: DetectorParams, data: TrainingSet, loss: LossKind, pen: PenaltyConfig,
                  attack_only: bool = False):
    idx = np.arange(len(data))
    feats = data.features.reshape(-1, data.features.shape[-1])
    bl, _ = batch_objective(params, data, idx, loss, pen, attack_only)
    dW, _ = backward(params, feats, bl.grad_logits)
    return bl, dW


def gradient_flow(params: DetectorParams, data: TrainingSet, cfg: TrainConfig, dt: float = 1e-3,
                  steps: int = 1000, attack_only: bool = True, sample_every: int = 1) -> Trajectory:
    """Explicit-Euler integration of ``dW/dt = -grad L`` over the full set."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if params.head_depth != 1:
        raise ValueError("gradient flow is defined for the linear head only")
    p = params.copy()
    mode = cfg.penalty_cfg.head_mode
    times, margins, weights, logits = [], [], [], []

    def sample(t):
        m, z = pair_margins(p, data, mode)
        times.append(t)
        margins.append(m)
        weights.append(p.W.copy())
        logits.append(z)

    sample(0.0)
    for k in range(1, steps + 1):
        _, dW = full_gradient(p, data, cfg.loss_kind, cfg.penalty_cfg, attack_only)
        p.W -= dt * dW
        if not np.all(np.isfinite(p.W)):
            raise FloatingPointError(f"non-finite state at flow step {k}")
        if k % sample_every == 0 or k == steps:
            sample(k * dt)
    return Trajectory(np.array(times), np.array(margins), weights, np.array(logits))
