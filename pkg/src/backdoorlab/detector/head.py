"""Classification head, detection losses and their analytic gradients.

Output columns: with an explicit background class (cross-entropy) column 0 is
background and column ``c`` is class ``c``; otherwise column ``c - 1`` is class
``c`` and background is the all-zero target.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from ..penalty import HeadMode
from .features import FeatureExtractor


class LossName(str, enum.Enum):
    CE = "ce"
    BCE = "bce"
    FOCAL = "focal"


NORMALIZERS = ("anchors", "positives")


@dataclass(frozen=True)
class LossKind:
    """Loss family plus focal parameters.

    ``normalize`` picks the divisor of the summed per-anchor loss: the number
    of non-ignored anchors, or the number of positive anchors (at least one).
    ``None`` means positives for focal loss, the usual practice for dense
    focal-loss detectors, and anchors otherwise.
    """

    name: LossName = LossName.CE
    gamma: float = 2.0
    alpha: Optional[float] = 0.25
    normalize: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "name", LossName(self.name))
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ValueError("focal alpha must lie in (0, 1]")
        if self.normalize is not None and self.normalize not in NORMALIZERS:
            raise ValueError(f"normalize must be one of {NORMALIZERS}")

    @property
    def normalizer(self) -> str:
        if self.normalize is not None:
            return self.normalize
        return "positives" if self.name is LossName.FOCAL else "anchors"

    @property
    def background_column(self) -> bool:
        return self.name is LossName.CE

    @property
    def head_mode(self) -> HeadMode:
        """Penalty form that matches how the loss normalises the logits."""
        return HeadMode.SOFTMAX if self.name is LossName.CE else HeadMode.INDEPENDENT

    def to_dict(self) -> dict:
        return {"name": self.name.value, "gamma": self.gamma, "alpha": self.alpha, "normalize": self.normalize}

    @classmethod
    def from_dict(cls, d: dict) -> "LossKind":
        return cls(LossName(d["name"]), d.get("gamma", 2.0), d.get("alpha", 0.25), d.get("normalize"))

    @classmethod
    def parse(cls, name: str) -> "LossKind":
        return cls(LossName(name))


@dataclass
class DetectorParams:
    W: np.ndarray  # (K, d) for depth 1, (K, hidden + 1) for depth 2
    n_classes: int
    extractor: FeatureExtractor = field(default_factory=FeatureExtractor)
    grid: tuple[int, int] = (3, 3)
    background_column: bool = False
    head_mode: HeadMode = HeadMode.INDEPENDENT
    V: Optional[np.ndarray] = None  # (d, hidden)

    def __post_init__(self):
        self.head_mode = HeadMode(self.head_mode)
        if self.n_outputs != self.W.shape[0]:
            raise ValueError(f"W has {self.W.shape[0]} rows, expected {self.n_outputs}")
        if self.V is not None and self.V.shape != (self.extractor.output_dim, self.W.shape[1] - 1):
            raise ValueError("hidden layer shape does not match W and the extractor")
        if self.V is None and self.W.shape[1] != self.extractor.output_dim:
            raise ValueError("W width does not match the extractor dimension")

    @property
    def head_depth(self) -> int:
        return 1 if self.V is None else 2

    @property
    def n_outputs(self) -> int:
        return self.n_classes + int(self.background_column)

    @property
    def class_offset(self) -> int:
        return int(self.background_column)

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.W.copy(), self.n_classes, self.extractor, self.grid,
                              self.background_column, self.head_mode,
                              None if self.V is None else self.V.copy())

    def flat(self) -> np.ndarray:
        parts = [self.W.ravel()] + ([] if self.V is None else [self.V.ravel()])
        return np.concatenate(parts)


def init_params(n_classes: int, loss: LossKind, extractor: FeatureExtractor = FeatureExtractor(),
                grid=(3, 3), head_depth: int = 1, hidden: int = 16, seed: int = 0,
                scale: float = 0.01) -> DetectorParams:
    rng = np.random.default_rng(seed)
    d = extractor.output_dim
    k = n_classes + int(loss.background_column)
    V = None
    width = d
    if head_depth == 2:
        V = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden))
        width = hidden + 1
    elif head_depth != 1:
        raise ValueError("head_depth must be 1 or 2")
    W = rng.normal(0.0, scale, size=(k, width))
    if not loss.background_column:
        # start from a low foreground prior so background anchors are not flooded with positives
        W[:, -1] = -np.log(99.0)
    return DetectorParams(W, n_classes, extractor, tuple(grid), loss.background_column, loss.head_mode, V)


def hidden_features(params: DetectorParams, features: np.ndarray) -> np.ndarray:
    """Inputs to the final linear layer (the features themselves for a linear head)."""
    if params.V is None:
        return features
    act = np.tanh(features @ params.V)
    return np.concatenate([act, np.ones(act.shape[:-1] + (1,))], axis=-1)


def forward(params: DetectorParams, features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    if f.shape[-1] != params.extractor.output_dim:
        raise ValueError(f"feature dimension {f.shape[-1]} != {params.extractor.output_dim}")
    return hidden_features(params, f) @ params.W.T


def backward(params: DetectorParams, features: np.ndarray, grad_logits: np.ndarray):
    """Parameter gradients ``(dW, dV)`` given ``dL/dlogits`` for a batch of anchors."""
    f = np.asarray(features, dtype=float).reshape(-1, params.extractor.output_dim)
    g = grad_logits.reshape(-1, params.n_outputs)
    h = hidden_features(params, f)
    dW = g.T @ h
    if params.V is None:
        return dW, None
    dh = (g @ params.W)[:, :-1]
    dpre = dh * (1.0 - h[:, :-1] ** 2)
    return dW, f.T @ dpre


def _one_hot(targets: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.zeros((targets.size, n_classes))
    fg = targets > 0
    y[np.nonzero(fg)[0], targets[fg] - 1] = 1.0
    return y


def detection_loss(logits: np.ndarray, targets: np.ndarray, kind: LossKind):
    """Normalised summed per-anchor loss and its gradient w.r.t. ``logits``.

    ``targets`` holds a class in 1..C, 0 for background or -1 to ignore. The
    divisor is chosen by ``kind.normalizer``.
    """
    z = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=int).ravel()
    z2 = z.reshape(t.size, -1)
    keep = t >= 0
    n = int(keep.sum())
    grad = np.zeros_like(z2)
    if n == 0:
        return 0.0, grad.reshape(z.shape)
    zk, tk = z2[keep], t[keep]
    if kind.name is LossName.CE:
        if z2.shape[1] < 2:
            raise ValueError("cross-entropy needs a background column plus classes")
        logp = log_softmax(zk, axis=1)
        rows = np.arange(n)
        per = -logp[rows, tk]
        g = softmax(zk, axis=1)
        g[rows, tk] -= 1.0
    else:
        y = _one_hot(tk, zk.shape[1])
        p = expit(zk)
        log_p, log_q = log_expit(zk), log_expit(-zk)
        if kind.name is LossName.BCE or kind.gamma == 0 and kind.alpha is None:
            per = -(y * log_p + (1 - y) * log_q).sum(axis=1)
            g = p - y
        else:
            per, g = _focal(p, log_p, log_q, y, kind)
    denom = max(int((tk > 0).sum()), 1) if kind.normalizer == "positives" else n
    grad[keep] = g / denom
    return float(per.sum() / denom), grad.reshape(z.shape)


def _focal(p, log_p, log_q, y, kind: LossKind):
    gam = kind.gamma
    q = 1.0 - p
    a_pos, a_neg = (1.0, 1.0) if kind.alpha is None else (kind.alpha, 1.0 - kind.alpha)
    loss_pos = -a_pos * q ** gam * log_p
    loss_neg = -a_neg * p ** gam * log_q
    grad_pos = a_pos * q ** gam * (gam * p * log_p - q)
    grad_neg = a_neg * p ** gam * (p - gam * q * log_q)
    per = (y * loss_pos + (1 - y) * loss_neg).sum(axis=1)
    return per, y * grad_pos + (1 - y) * grad_neg


def class_scores(params: DetectorParams, logits: np.ndarray) -> np.ndarray:
    """Per-class foreground scores, columns ordered 1..C."""
    if params.head_mode is HeadMode.SOFTMAX:
        probs = softmax(logits, axis=-1)
    else:
        probs = expit(logits)
    return probs[..., params.class_offset:]
