"""Box arithmetic, IoU and the two matching procedures.

``penalty_match`` selects the (ground truth, prediction) pairs that activate
the attack penalty; ``metric_match`` is the confidence-ordered one-to-one
assignment used by AP and the "detected" predicate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box coordinates: {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    @property
    def degenerate(self) -> bool:
        return self.area <= 0

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "BoundingBox":
        x1, y1, x2, y2 = coords
        return cls(x1, y1, x2, y2)


@dataclass
class GroundTruthObject:
    """One annotated object.

    ``train_label`` is what the trainer sees (an attack may rewrite it, ``None``
    means background); ``original_label`` is the evaluation truth and never
    changes after scene generation.
    """

    box: BoundingBox
    original_label: int
    train_label: Optional[int] = None
    poisoned: bool = False
    removed: bool = False

    def __post_init__(self):
        if self.train_label is None and not self.removed:
            self.train_label = self.original_label


@dataclass
class Prediction:
    box: BoundingBox
    logits: np.ndarray
    score: float
    label: int
    background_logit: Optional[float] = None


@dataclass
class MatchSet:
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    # degenerate boxes never overlap anything, themselves included
    if a.degenerate or b.degenerate:
        return 0.0
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of xyxy boxes."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (union > 0)
    np.divide(inter, union, out=out, where=valid)
    return out


def penalty_match(preds: Sequence[Prediction], gts: Sequence[GroundTruthObject], rho: float) -> MatchSet:
    """Pairs with IoU strictly above ``rho`` against a trigger-bearing object.

    A prediction may be paired with several objects; nothing is deduplicated.
    """
    if not 0 <= rho < 1:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    pairs = []
    for i, gt in enumerate(gts):
        if not gt.poisoned:
            continue
        for j, pred in enumerate(preds):
            if iou(pred.box, gt.box) > rho:
                pairs.append((i, j))
    return MatchSet(pairs)


def metric_match(
    preds: Sequence[Prediction], gts: Sequence[GroundTruthObject], iou_thr: float
) -> dict[int, int]:
    """Greedy one-to-one assignment, returned as ``{pred_index: gt_index}``.

    Predictions are visited by descending score; each takes the unmatched
    ground truth of the same class (``original_label``) with the highest
    IoU >= ``iou_thr``, ties going to the lower gt index.
    """
    if not 0 < iou_thr <= 1:
        raise ValueError(f"iou_thr must lie in (0, 1], got {iou_thr}")
    # content-based tie-break keeps the result independent of input order
    order = sorted(range(len(preds)), key=lambda j: (-preds[j].score, preds[j].box.as_list(), j))
    taken: set[int] = set()
    assignment: dict[int, int] = {}
    for j in order:
        best, best_iou = -1, -1.0
        for i, gt in enumerate(gts):
            if i in taken or gt.original_label != preds[j].label:
                continue
            o = iou(preds[j].box, gt.box)
            if o >= iou_thr and o > best_iou:
                best, best_iou = i, o
        if best >= 0:
            taken.add(best)
            assignment[j] = best
    return assignment
