"""Log-barrier attack penalty and its analytic logit gradients.

Two forms share one barrier ``softplus(s - tau)``:

* independent logits: ``s`` is the raw logit of the object's original class;
* softmax heads: ``s`` is the one-vs-rest log-odds
  ``z_y - log(sum_{c != y} exp(z_c))``.

The object-level functions (``penalty_independent``/``penalty_softmax``) work on
``Prediction``/``GroundTruthObject`` lists and do their own IoU gating. The
array function ``attack_penalty`` is what the trainer calls on precomputed
(row, column) pairs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .geometry import GroundTruthObject, Prediction, penalty_match


class HeadMode(str, enum.Enum):
    INDEPENDENT = "independent"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class PenaltyConfig:
    tau: float = 0.0
    rho: float = 0.5
    lam: float = 1.0
    head_mode: HeadMode = HeadMode.INDEPENDENT

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if not np.isfinite(self.tau):
            raise ValueError("tau must be finite")
        object.__setattr__(self, "head_mode", HeadMode(self.head_mode))

    def to_dict(self) -> dict:
        return {"tau": self.tau, "rho": self.rho, "lambda": self.lam, "head_mode": self.head_mode.value}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        return cls(tau=d.get("tau", 0.0), rho=d.get("rho", 0.5), lam=d.get("lambda", 1.0),
                   head_mode=d.get("head_mode", "independent"))


@dataclass
class PenaltyOutput:
    value: float
    grad_logits: np.ndarray  # (n_preds, C)
    grad_background: np.ndarray  # (n_preds,), nonzero only for softmax heads with a background logit


def softplus(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(under="ignore"):  # exp(-|x|) flushing to 0 is the correct limit
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def barrier(s, tau):
    """``-log(1 - sigmoid(s - tau))``, evaluated as a softplus."""
    return softplus(np.asarray(s, dtype=float) - tau)


def barrier_grad(s, tau):
    out = expit(np.asarray(s, dtype=float) - tau)
    return out if np.ndim(out) else float(out)


def barrier_hess(s, tau):
    sig = expit(np.asarray(s, dtype=float) - tau)
    # sigma(u) * sigma(-u) avoids the cancellation in 1 - sigma(u) for large u
    out = sig * expit(-(np.asarray(s, dtype=float) - tau))
    return out if np.ndim(out) else float(out)


def log_odds(z: Sequence[float], y: int) -> float:
    """One-vs-rest log-odds of class ``y`` (1-based) against all other logits."""
    z = np.asarray(z, dtype=float)
    if z.size < 2:
        raise ValueError("log-odds need at least two classes")
    col = y - 1
    rest = np.delete(z, col)
    return float(z[col] - logsumexp(rest))


def log_odds_columns(logits: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised log-odds for ``logits[rows, cols]`` plus competitor weights.

    Returns ``(ell, q)`` where ``q[p, k]`` is the softmax weight of column ``k``
    among the competitors of pair ``p`` (zero on the pair's own column).
    """
    sel = logits[rows]
    if sel.shape[1] < 2:
        raise ValueError("log-odds need at least two classes")
    masked = sel.copy()
    masked[np.arange(len(rows)), cols] = -np.inf
    lse = logsumexp(masked, axis=1)
    q = np.exp(masked - lse[:, None])
    return sel[np.arange(len(rows)), cols] - lse, q


def attack_penalty(logits: np.ndarray, rows, cols, tau: float, head_mode=HeadMode.INDEPENDENT):
    """Summed barrier over pairs and its gradient w.r.t. ``logits``.

    ``rows``/``cols`` index the matched (prediction, original-class column)
    pairs. A row may appear several times; contributions accumulate.
    """
    logits = np.asarray(logits, dtype=float)
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    grad = np.zeros_like(logits)
    if rows.size == 0:
        return 0.0, grad
    if HeadMode(head_mode) is HeadMode.INDEPENDENT:
        s = logits[rows, cols]
        np.add.at(grad, (rows, cols), expit(s - tau))
        return float(np.sum(softplus(s - tau))), grad
    ell, q = log_odds_columns(logits, rows, cols)
    sig = expit(ell - tau)
    # d ell / d z_y = 1, d ell / d z_k = -q_k for competitors
    contrib = -sig[:, None] * q
    contrib[np.arange(len(rows)), cols] = sig
    np.add.at(grad, rows, contrib)
    return float(np.sum(softplus(ell - tau))), grad


def _stack_logits(preds: Sequence[Prediction], with_background: bool) -> np.ndarray:
    rows = []
    for p in preds:
        z = np.asarray(p.logits, dtype=float)
        if with_background:
            z = np.concatenate([z, [p.background_logit]])
        rows.append(z)
    return np.array(rows)


def _object_penalty(preds, gts, cfg: PenaltyConfig, mode: HeadMode) -> PenaltyOutput:
    n_cls = len(preds[0].logits) if preds else 0
    with_bg = mode is HeadMode.SOFTMAX and bool(preds) and preds[0].background_logit is not None
    out = PenaltyOutput(0.0, np.zeros((len(preds), n_cls)), np.zeros(len(preds)))
    matches = penalty_match(preds, gts, cfg.rho)
    if not matches.pairs:
        return out
    logits = _stack_logits(preds, with_bg)
    rows = np.array([j for _, j in matches])
    cols = np.array([gts[i].original_label - 1 for i, _ in matches])
    value, grad = attack_penalty(logits, rows, cols, cfg.tau, mode)
    out.value = value
    out.grad_logits = grad[:, :n_cls]
    if with_bg:
        out.grad_background = grad[:, n_cls]
    return out


def penalty_independent(preds: Sequence[Prediction], gts: Sequence[GroundTruthObject], cfg: PenaltyConfig) -> PenaltyOutput:
    if cfg.head_mode is not HeadMode.INDEPENDENT:
        raise ValueError("penalty_independent needs head_mode=independent")
    return _object_penalty(preds, gts, cfg, HeadMode.INDEPENDENT)


def penalty_softmax(preds: Sequence[Prediction], gts: Sequence[GroundTruthObject], cfg: PenaltyConfig) -> PenaltyOutput:
    """Softmax form; a prediction's ``background_logit`` joins the competitors when set."""
    if cfg.head_mode is not HeadMode.SOFTMAX:
        raise ValueError("penalty_softmax needs head_mode=softmax")
    for p in preds:
        n = len(p.logits) + (p.background_logit is not None)
        if n < 2:
            raise ValueError("softmax penalty needs at least two logits per prediction")
    return _object_penalty(preds, gts, cfg, HeadMode.SOFTMAX)


def total_loss(det_loss: float, penalty: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return det_loss + lam * penalty
