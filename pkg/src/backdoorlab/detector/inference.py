"""Inference: per-anchor, per-class detections followed by class-wise NMS.

Every (anchor, class) pair whose score clears the threshold becomes a
candidate, as in dense detectors. Suppression only happens within a class, so
one object can keep a box for its true class and one for a backdoor target.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..geometry import BoundingBox, Prediction, iou_matrix
from .features import AnchorGrid
from .head import DetectorParams, class_scores, forward


def nms_classwise(preds: Sequence[Prediction], iou_thr: float) -> list[Prediction]:
    """Greedy NMS run separately for each label; survivors sorted by descending score."""
    keep: list[Prediction] = []
    for label in sorted({p.label for p in preds}):
        group = sorted((p for p in preds if p.label == label), key=lambda p: (-p.score, p.box.as_list()))
        boxes = np.array([p.box.as_list() for p in group]).reshape(-1, 4)
        overlap = iou_matrix(boxes, boxes)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            keep.append(group[i])
            alive[i + 1:] &= overlap[i, i + 1:] <= iou_thr
    keep.sort(key=lambda p: (-p.score, p.label, p.box.as_list()))
    return keep


def anchor_logits(params: DetectorParams, image: np.ndarray):
    grid = AnchorGrid.for_image(image, *params.grid)
    feats = params.extractor.extract_grid(image, grid)
    return params.extractor.anchor_boxes(grid), forward(params, feats)


def decode(params: DetectorParams, boxes: np.ndarray, logits: np.ndarray, score_threshold: float,
           nms_iou: float) -> list[Prediction]:
    scores = class_scores(params, logits)
    off = params.class_offset
    cands = []
    for a, c in zip(*np.nonzero(scores >= score_threshold)):
        cands.append(Prediction(
            box=BoundingBox.from_list(boxes[a].tolist()),
            logits=logits[a, off:].copy(),
            score=float(scores[a, c]),
            label=int(c) + 1,
            background_logit=float(logits[a, 0]) if off else None,
        ))
    return nms_classwise(cands, nms_iou)


def predict(params: DetectorParams, image: np.ndarray, score_threshold: float = 0.05,
            nms_iou: float = 0.5) -> list[Prediction]:
    if not (0 <= score_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    boxes, logits = anchor_logits(params, image)
    return decode(params, boxes, logits, score_threshold, nms_iou)


def predict_many(params: DetectorParams, images: Sequence[np.ndarray], score_threshold: float = 0.05,
                 nms_iou: float = 0.5) -> list[list[Prediction]]:
    return [predict(params, im, score_threshold, nms_iou) for im in images]
