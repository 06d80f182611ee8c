"""Occurrence-weighted multi-label losses and the frame-level F1 metric.

The training objective combines a weighted binary cross entropy with a
weighted Dice (soft F1) term:

    L_bce = -sum_i w_i [p_i log p^_i + (1-p_i) log(1-p^_i)]
    L_f1  =  sum_i w_i (1 - (2 p_i p^_i + eps) / (p_i^2 + p^_i^2 + eps))
    L_au  =  L_bce + mu * L_f1

with w_i = (1/r_i) / sum_u (1/r_u) built from the per-AU occurrence rates of
the training set. Batch values are the mean of per-frame losses. Every
`*_value_and_grad` returns the analytic d(loss)/d(probabilities); the tests
check these against central finite differences at 1e-6 relative error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Normalized inverse-occurrence weights; sum(w) == 1."""

    w: np.ndarray
    rates: np.ndarray


def compute_weights(rates) -> LossWeights:
    """Inverse-rate weights from per-AU occurrence rates in (0, 1]."""
    r = np.asarray(rates, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ConfigError("occurrence rates must be a non-empty 1-d array")
    bad = np.flatnonzero(r <= 0.0)
    if bad.size:
        raise ConfigError(
            f"AU index {bad[0]} has occurrence rate {r[bad[0]]}; "
            "exclude AUs that never occur in the training set"
        )
    if np.any(r > 1.0):
        raise ConfigError("occurrence rates must lie in (0, 1]")
    inv = 1.0 / r
    return LossWeights(w=inv / inv.sum(), rates=r)


def _prep(p_hat, p):
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if p_hat.shape != p.shape:
        raise ValueError(f"shape mismatch: predictions {p_hat.shape} vs labels {p.shape}")
    return p_hat, p


def weighted_bce_value_and_grad(p_hat, p, weights: LossWeights):
    """Weighted multi-label cross entropy; returns (scalar, dL/dp_hat).

    Predictions are clamped to [1e-7, 1-1e-7] before the logs; the gradient
    is zero where the clamp is active.
    """
    p_hat, p = _prep(p_hat, p)
    n = p_hat.shape[0]
    pc = np.clip(p_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p_hat > PROB_CLAMP) & (p_hat < 1.0 - PROB_CLAMP)
    w = weights.w
    per_frame = -(w * (p * np.log(pc) + (1.0 - p) * np.log(1.0 - pc))).sum(axis=1)
    loss = float(per_frame.mean())
    grad = -(w / n) * (p / pc - (1.0 - p) / (1.0 - pc)) * inside
    return loss, grad


def weighted_bce(p_hat, p, weights: LossWeights) -> float:
    return weighted_bce_value_and_grad(p_hat, p, weights)[0]


def weighted_dice_value_and_grad(p_hat, p, weights: LossWeights, eps: float = 1.0):
    """Weighted multi-label Dice (soft F1) loss; returns (scalar, dL/dp_hat)."""
    if eps <= 0:
        raise ConfigError("dice smooth term must be positive")
    p_hat, p = _prep(p_hat, p)
    n = p_hat.shape[0]
    w = weights.w
    num = 2.0 * p * p_hat + eps
    den = p * p + p_hat * p_hat + eps
    per_frame = (w * (1.0 - num / den)).sum(axis=1)
    loss = float(per_frame.mean())
    grad = -(w / n) * (2.0 * p * den - num * 2.0 * p_hat) / (den * den)
    return loss, grad


def weighted_dice(p_hat, p, weights: LossWeights, eps: float = 1.0) -> float:
    return weighted_dice_value_and_grad(p_hat, p, weights, eps)[0]


def au_loss_value_and_grad(p_hat, p, weights: LossWeights, mu: float = 1.5, eps: float = 1.0):
    """Overall detection loss L_bce + mu * L_f1; returns (scalar, dL/dp_hat)."""
    if mu < 0:
        raise ConfigError("dice trade-off mu must be non-negative")
    bce, dbce = weighted_bce_value_and_grad(p_hat, p, weights)
    if mu == 0.0:
        return bce, dbce
    dice, ddice = weighted_dice_value_and_grad(p_hat, p, weights, eps)
    return bce + mu * dice, dbce + mu * ddice


def au_loss(p_hat, p, weights: LossWeights, mu: float = 1.5, eps: float = 1.0) -> float:
    return au_loss_value_and_grad(p_hat, p, weights, mu, eps)[0]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def f1_frame(preds, labels):
    """Frame-based per-AU F1 and its unweighted average.

    `preds` may be probabilities (thresholded at 0.5) or already binary.
    Degenerate AUs (no TP, FP or FN) score 0 by convention; the returned mask
    marks them so reports can flag the zero as a convention, not a result.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape} vs labels {labels.shape}")
    pb = preds >= 0.5
    lb = labels >= 0.5
    tp = np.sum(pb & lb, axis=0).astype(np.float64)
    fp = np.sum(pb & ~lb, axis=0).astype(np.float64)
    fn = np.sum(~pb & lb, axis=0).astype(np.float64)
    den = 2.0 * tp + fp + fn
    degenerate = den == 0
    f1 = np.where(degenerate, 0.0, 2.0 * tp / np.where(degenerate, 1.0, den))
    return f1, float(f1.mean()), degenerate


@dataclass
class MetricsReport:
    """Per-AU F1 evaluation result plus run provenance."""

    au_names: List[str]
    per_au_f1: np.ndarray
    avg_f1: float
    degenerate: np.ndarray
    fold_id: Optional[int] = None
    seed: Optional[int] = None
    losses: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, preds, labels, au_names=None, fold_id=None, seed=None, losses=None):
        per_au, avg, degenerate = f1_frame(preds, labels)
        if au_names is None:
            au_names = [f"au{i}" for i in range(per_au.size)]
        return cls(list(au_names), per_au, avg, degenerate, fold_id, seed, losses or {})

    def format_table(self) -> str:
        """Text table, one row per AU plus Avg, percentages to one decimal."""
        lines = []
        if self.fold_id is not None:
            lines.append(f"fold: {self.fold_id}")
        if self.seed is not None:
            lines.append(f"seed: {self.seed}")
        width = max(3, *(len(n) for n in self.au_names))
        lines.append(f"{'AU':<{width}}  F1")
        for name, f1, deg in zip(self.au_names, self.per_au_f1, self.degenerate):
            flag = " *" if deg else ""
            lines.append(f"{name:<{width}}  {100.0 * f1:5.1f}{flag}")
        lines.append(f"{'Avg':<{width}}  {100.0 * self.avg_f1:5.1f}")
        if bool(self.degenerate.any()):
            lines.append("* no positive predictions or labels; F1 = 0 by convention")
        return "\n".join(lines) + "\n"
