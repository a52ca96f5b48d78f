"""Prediction, semantic-integrity and utilization objectives and their weighted sum.

Continuous tokens are the backbone's per-cell codebook logits. Each loss is an
exact mean over grid cells (and over the batch when a leading axis is present).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    gamma: float = 0.2
    # 0 disables the prediction term (the "w/o L_p" ablation)
    prediction: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0 or self.prediction < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")


@dataclass
class LossReport:
    l_p: T.Tensor
    l_s: T.Tensor
    l_u: T.Tensor
    total: T.Tensor

    def values(self) -> dict[str, float]:
        return {"l_p": self.l_p.item(), "l_s": self.l_s.item(), "l_u": self.l_u.item(), "total": self.total.item()}


def label_prediction_loss(masked_logits: T.Tensor, target_tokens: np.ndarray) -> T.Tensor:
    return T.mean(T.cross_entropy(masked_logits, target_tokens))


def semantic_integrity_loss(fused_x_logits: T.Tensor, fused_y_logits: T.Tensor,
                            target_x: np.ndarray, target_y: np.ndarray) -> T.Tensor:
    ce = T.add(T.cross_entropy(fused_x_logits, target_x), T.cross_entropy(fused_y_logits, target_y))
    return T.mean(ce)


def utilization_loss(fused_x: T.Tensor, fused_y: T.Tensor, query_x: T.Tensor, masked: T.Tensor) -> T.Tensor:
    cos = T.add(T.cosine_similarity(fused_x, query_x), T.cosine_similarity(fused_y, masked))
    return T.mul(T.mean(cos), -1.0)


def total_loss(l_p: T.Tensor, l_s: T.Tensor, l_u: T.Tensor, weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum, combined in 64-bit so logged components reproduce the total exactly."""
    l_p, l_s, l_u = (T.cast(x, np.float64) for x in (l_p, l_s, l_u))
    total = T.add(T.add(T.mul(l_p, weights.prediction), T.mul(l_s, weights.lam)), T.mul(l_u, weights.gamma))
    return LossReport(l_p, l_s, l_u, total)


def quadrants(grid):
    """Split (B, 2G, 2G, ...) into top-left, top-right, bottom-left, bottom-right blocks."""
    g = grid.shape[1] // 2
    tl = grid[:, :g, :g]
    tr = grid[:, :g, g:]
    bl = grid[:, g:, :g]
    br = grid[:, g:, g:]
    return tl, tr, bl, br


def canvas_losses(logits: T.Tensor, target_tokens: np.ndarray, weights: LossWeights = LossWeights()) -> LossReport:
    """All three objectives from one encoded canvas.

    logits: (B, 2G, 2G, N_c) for [[X_f, Y_f], [X_q, mask]].
    target_tokens: (B, 2G, 2G) quantized [[X_q, Y_q], [X_q, Y_q]]; the top
    row supplies the as-prompt targets and the bottom row the as-query targets.
    """
    t_xf, t_yf, t_xq, t_m = quadrants(logits)
    d1_x, d1_y, _d2_x, d2_y = quadrants(target_tokens)
    l_p = label_prediction_loss(t_m, d2_y)
    l_s = semantic_integrity_loss(t_xf, t_yf, d1_x, d1_y)
    l_u = utilization_loss(t_xf, t_yf, t_xq, t_m)
    return total_loss(l_p, l_s, l_u, weights)
