"""Detection and backdoor metrics: COCO-style mAP, instance-level ASR/TDR, poison-mAP.

Predictions and ground truth are passed per image as parallel lists. ASR and
TDR are computed per evaluation instance, where exactly one object (the focal
object) carries the trigger.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import BoundingBox, GroundTruthObject, Prediction, metric_match

IOU_SWEEP = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class DetectedPredicate:
    iou_thr: float = 0.5
    score_min: float = 0.5

    def __post_init__(self):
        if not (0 < self.iou_thr <= 1 and 0 < self.score_min <= 1):
            raise ValueError("iou_thr and score_min must lie in (0, 1]")


def average_precision(preds: Sequence[Sequence[Prediction]], gts: Sequence[Sequence[GroundTruthObject]],
                      cls: int, iou_thr: float) -> Optional[float]:
    """101-point interpolated AP for one class; ``None`` when the class has no ground truth."""
    n_pos = sum(1 for img in gts for g in img if g.original_label == cls)
    if n_pos == 0:
        return None
    scored = []
    for i, (p_img, g_img) in enumerate(zip(preds, gts)):
        mine = [p for p in p_img if p.label == cls]
        matched = metric_match(mine, g_img, iou_thr)
        for j, p in enumerate(mine):
            scored.append((-p.score, i, p.box.as_list(), j in matched))
    if not scored:
        return 0.0
    scored.sort(key=lambda r: r[:3])
    tp = np.cumsum([r[3] for r in scored], dtype=float)
    fp = np.cumsum([not r[3] for r in scored], dtype=float)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean())


def classes_with_gt(gts) -> list[int]:
    return sorted({g.original_label for img in gts for g in img})


def map_at(preds, gts, iou_thr: float) -> float:
    aps = [average_precision(preds, gts, c, iou_thr) for c in classes_with_gt(gts)]
    if not aps:
        raise ValueError("no ground-truth objects to evaluate")
    return float(np.mean(aps))


def map_range(preds, gts, thresholds: Sequence[float] = IOU_SWEEP) -> float:
    """mAP averaged over IoU thresholds 0.50:0.05:0.95 and classes with ground truth."""
    return float(np.mean([map_at(preds, gts, t) for t in thresholds]))


def detected(preds: Sequence[Prediction], objects: Sequence[GroundTruthObject], focal: int, label: int,
             predicate: DetectedPredicate) -> bool:
    """Whether the focal object is matched by a confident prediction of ``label``."""
    confident = [p for p in preds if p.score >= predicate.score_min]
    query = [replace(o) for o in objects]
    query[focal] = replace(query[focal], original_label=label)
    return focal in metric_match(confident, query, predicate.iou_thr).values()


def _rate(flags) -> float:
    flags = list(flags)
    if not flags:
        raise ValueError("no evaluation instances; the rate is undefined")
    return float(np.mean(flags))


def _instances(instances, outputs, exclude_label):
    if len(instances) != len(outputs):
        raise ValueError("instances and detector outputs differ in length")
    for inst, preds in zip(instances, outputs):
        if exclude_label is not None and inst.objects[inst.focal].original_label == exclude_label:
            continue
        yield inst, preds


def tdr(instances, outputs, predicate: DetectedPredicate = DetectedPredicate(),
        exclude_label: Optional[int] = None) -> float:
    """Fraction of focal objects whose original class is still detected."""
    return _rate(detected(p, i.objects, i.focal, i.objects[i.focal].original_label, predicate)
                 for i, p in _instances(instances, outputs, exclude_label))


def asr_oda(instances, outputs, predicate: DetectedPredicate = DetectedPredicate()) -> float:
    """Fraction of focal objects whose original class is not detected."""
    return _rate(not detected(p, i.objects, i.focal, i.objects[i.focal].original_label, predicate)
                 for i, p in _instances(instances, outputs, None))


def asr_rma(instances, outputs, target: int, predicate: DetectedPredicate = DetectedPredicate()) -> float:
    """Fraction of focal objects (not already of class ``target``) detected as ``target``."""
    return _rate(detected(p, i.objects, i.focal, target, predicate)
                 for i, p in _instances(instances, outputs, target))


def poison_map(triggered_gts, outputs) -> float:
    """mAP against original labels on a set where every poisonable object carries a trigger."""
    return map_range(outputs, triggered_gts)


# ------------------------------------------------------------------ reports


@dataclass
class MetricsReport:
    map_clean: float
    asr: dict[float, float]
    tdr: dict[float, float]
    poison_map: float
    instances: int
    skipped: int
    score_min: float = 0.5
    sensitivity: dict[float, tuple[float, float]] = field(default_factory=dict)  # score_min -> (asr50, tdr50)

    def __post_init__(self):
        for v in list(self.asr.values()) + list(self.tdr.values()):
            if not 0 <= v <= 1:
                raise ValueError("rates must lie in [0, 1]")


def sweep_suffix(thr: float) -> str:
    return f"{int(round(thr * 100))}"


RESULT_COLUMNS = (
    ["run_id", "method", "model", "lambda", "poison_ratio", "placement", "map_clean", "asr50", "tdr50",
     "poison_map"]
    + [f"asr{sweep_suffix(t)}" for t in IOU_SWEEP[1:]]
    + [f"tdr{sweep_suffix(t)}" for t in IOU_SWEEP[1:]]
    + ["seed"]
)
EXTRA_COLUMNS = ["status", "axis", "axis_value", "repeat", "map_ratio", "asr50_s30", "tdr50_s30",
                 "instances", "skipped"]


def report_row(report: MetricsReport, **meta) -> dict:
    row = {k: meta.get(k, "") for k in RESULT_COLUMNS + EXTRA_COLUMNS}
    row.update(map_clean=report.map_clean, poison_map=report.poison_map,
               asr50=report.asr[0.5], tdr50=report.tdr[0.5],
               instances=report.instances, skipped=report.skipped)
    for t in IOU_SWEEP[1:]:
        row[f"asr{sweep_suffix(t)}"] = report.asr[t]
        row[f"tdr{sweep_suffix(t)}"] = report.tdr[t]
    if 0.3 in report.sensitivity:
        row["asr50_s30"], row["tdr50_s30"] = report.sensitivity[0.3]
    row.setdefault("status", "ok")
    if not row["status"]:
        row["status"] = "ok"
    return row


def write_results_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS + EXTRA_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_results_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def report_from_row(row: dict) -> MetricsReport:
    asr = {0.5: float(row["asr50"])}
    rates_tdr = {0.5: float(row["tdr50"])}
    for t in IOU_SWEEP[1:]:
        asr[t] = float(row[f"asr{sweep_suffix(t)}"])
        rates_tdr[t] = float(row[f"tdr{sweep_suffix(t)}"])
    sens = {}
    if row.get("asr50_s30") not in (None, ""):
        sens[0.3] = (float(row["asr50_s30"]), float(row["tdr50_s30"]))
    sens[0.5] = (asr[0.5], rates_tdr[0.5])
    return MetricsReport(float(row["map_clean"]), asr, rates_tdr, float(row["poison_map"]),
                         int(row["instances"]), int(row["skipped"]), 0.5, sens)


def detection_dump(image_ids: Sequence, outputs: Sequence[Sequence[Prediction]]) -> list[dict]:
    return [{"image_id": iid, "bbox": p.box.as_list(), "class": p.label, "score": p.score}
            for iid, preds in zip(image_ids, outputs) for p in preds]


def write_detection_dump(image_ids, outputs, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(detection_dump(image_ids, outputs)))
    return path


def read_detection_dump(path) -> dict:
    """``{image_id: [Prediction, ...]}`` with empty logits (the dump carries scores only)."""
    out: dict = {}
    for d in json.loads(Path(path).read_text()):
        out.setdefault(d["image_id"], []).append(
            Prediction(BoundingBox.from_list(d["bbox"]), np.zeros(0), float(d["score"]), int(d["class"])))
    return out
