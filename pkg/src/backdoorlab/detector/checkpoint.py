"""JSON checkpoints: weights row-major with their shapes, extractor spec, training config."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..penalty import HeadMode
from .features import FeatureExtractor
from .head import DetectorParams

FORMAT = "backdoorlab-checkpoint"
VERSION = 1


def _matrix(a: np.ndarray) -> dict:
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": a.ravel().tolist()}


def _unmatrix(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=float).reshape(d["rows"], d["cols"])


def params_to_doc(params: DetectorParams, train_config: Optional[dict] = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "head_depth": params.head_depth,
        "n_classes": params.n_classes,
        "background_column": params.background_column,
        "head_mode": params.head_mode.value,
        "grid": list(params.grid),
        "extractor": params.extractor.to_dict(),
        "W": _matrix(params.W),
        "V": None if params.V is None else _matrix(params.V),
        "train_config": train_config,
    }


def params_from_doc(doc: dict) -> DetectorParams:
    if doc.get("format") != FORMAT:
        raise ValueError("not a detector checkpoint")
    return DetectorParams(
        W=_unmatrix(doc["W"]),
        n_classes=doc["n_classes"],
        extractor=FeatureExtractor.from_dict(doc["extractor"]),
        grid=tuple(doc["grid"]),
        background_column=doc["background_column"],
        head_mode=HeadMode(doc["head_mode"]),
        V=None if doc["V"] is None else _unmatrix(doc["V"]),
    )


def save_checkpoint(params: DetectorParams, path, train_config: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params_to_doc(params, train_config)))
    return path


def load_checkpoint(path):
    """Returns ``(params, train_config_dict_or_None)``."""
    doc = json.loads(Path(path).read_text())
    return params_from_doc(doc), doc.get("train_config")
