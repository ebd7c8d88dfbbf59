"""Toy anchor-grid detector: fixed colour features plus a linear or one-hidden-layer head."""

from .bench import BenchReport, ScalingReport, benchmark_penalty_overhead, penalty_scaling
from .checkpoint import load_checkpoint, params_from_doc, params_to_doc, save_checkpoint
from .features import AnchorGrid, FeatureExtractor, corner_views, extract_features
from .head import (DetectorParams, LossKind, LossName, backward, class_scores, detection_loss,
                   forward, init_params)
from .inference import decode, nms_classwise, predict, predict_many
from .training import (Assignment, EpochRecord, TrainConfig, TrainingDiverged, TrainingSet,
                       TrainResult, Trajectory, assign_targets, batch_objective, build_training_set,
                       fine_tune, full_gradient, gradient_flow, pair_margins, train)

__all__ = [
    "AnchorGrid", "Assignment", "BenchReport", "DetectorParams", "EpochRecord", "FeatureExtractor",
    "LossKind", "LossName", "ScalingReport", "TrainConfig", "TrainResult", "TrainingDiverged",
    "TrainingSet", "Trajectory", "assign_targets", "backward", "batch_objective",
    "benchmark_penalty_overhead", "build_training_set", "class_scores", "corner_views", "decode",
    "detection_loss", "extract_features", "fine_tune", "forward", "full_gradient",
    "gradient_flow", "init_params", "load_checkpoint", "nms_classwise", "pair_margins",
    "params_from_doc", "params_to_doc", "penalty_scaling", "predict", "predict_many", "save_checkpoint",
    "train",
]
