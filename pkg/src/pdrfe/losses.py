"""Training objectives: margin link-prediction loss and defect cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-12


@dataclass(frozen=True)
class MarginConfig:
    margin: float = 1.0
    negatives_per_positive: int = 5

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negatives_per_positive < 1:
            raise ValueError("need at least one negative per positive")


def _dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise T.ShapeMismatchError(f"inner product of {a.shape} and {b.shape}")
    return T.tsum(T.mul(a, b))


def margin_loss(h_u: Tensor, pos: Sequence[Tensor], negs: Sequence[Tensor],
                margin: float) -> Tensor:
    """Sum of hinge terms over every (positive, negative) skill pair.

    Each term is max(margin - <h_u, h_pos> + <h_u, h_neg>, 0); the
    subgradient at the hinge point is 0. Callers normalize by pair count.
    """
    if not pos or not negs:
        raise ValueError("margin_loss needs nonempty positive and negative lists")
    total = None
    for hp in pos:
        sp = _dot(h_u, hp)
        for hn in negs:
            term = T.relu(margin - sp + _dot(h_u, hn))
            total = term if total is None else total + term
    return total


def margin_loss_pairs(h_u: Tensor, h_pos: Tensor, h_neg: Tensor,
                      margin: float) -> Tensor:
    """Batched margin loss, mean over positive x negative pairs.

    `h_u` and `h_pos` are (B, d) rows; `h_neg` is (B*k, d) with the k
    negatives of row b stored at rows b*k .. b*k+k-1.
    """
    b, d = h_u.data.shape
    if h_pos.data.shape != (b, d):
        raise T.ShapeMismatchError("positive rows must match customer rows")
    if h_neg.data.shape[0] % b != 0 or h_neg.data.shape[1] != d:
        raise T.ShapeMismatchError("negative rows must be a multiple of batch size")
    k = h_neg.data.shape[0] // b
    pos_scores = T.tsum(T.mul(h_u, h_pos), axis=1)
    rep = np.repeat(np.arange(b), k)
    neg_scores = T.tsum(T.mul(T.gather_rows(h_u, rep), h_neg), axis=1)
    hinge = T.relu(margin - T.gather_rows(pos_scores, rep) + neg_scores)
    return T.tmean(hinge)


def defect_ce(p: Tensor, y: np.ndarray | float) -> Tensor:
    """Binary cross-entropy against {0,1} labels; batches return the mean.

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs.
    """
    labels = np.asarray(y, dtype=np.float64)
    if labels.shape != p.data.shape:
        raise T.ShapeMismatchError(f"labels {labels.shape} vs probabilities {p.shape}")
    if labels.size and not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("defect labels must be 0 or 1")
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    yt = Tensor(labels)
    per_row = -(T.mul(yt, T.log(pc)) + T.mul(1.0 - yt, T.log(1.0 - pc)))
    if p.data.ndim == 0:
        return per_row
    return T.tmean(per_row)


def cross_entropy_of_probs(p: np.ndarray, y: np.ndarray) -> float:
    """Plain-numpy CE for reporting paths that never need gradients."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
