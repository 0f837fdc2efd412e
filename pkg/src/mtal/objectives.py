"""Overarching / local losses, their negative gradients, and evaluation metrics.

Conventions used throughout:

* explicit feedback pairs with squared loss and RMSE; implicit pairs with
  binary cross-entropy and MAP.
* implicit predictions are logits everywhere; the sigmoid is applied only
  inside loss, residual and metric computations, never stored.
* residuals are per-cell negative derivatives of the per-cell loss, without
  the 1/N of a mean loss; the scalar factor is absorbed by the learning rate.
"""
from __future__ import annotations

import enum

import numpy as np

from .sparse import SparseRows

# Target matrices with an observation mask: the stored cells are the mask.
MaskedMatrix = SparseRows


class FeedbackKind(enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def overarching_loss(pred, targets: MaskedMatrix, kind: FeedbackKind) -> float:
    """Mean loss over the masked cells; ``pred`` is aligned with targets.vals."""
    pred = np.asarray(pred, dtype=np.float64)
    if targets.nnz == 0:
        raise ValueError("loss over an empty mask is undefined")
    if pred.shape != targets.vals.shape:
        raise ValueError("prediction vector must align with the masked cells")
    if kind is FeedbackKind.EXPLICIT:
        diff = pred - targets.vals
        return float(0.5 * np.mean(diff * diff))
    # BCE with logits: log(1+exp(p)) - t*p, stabilized via logaddexp.
    return float(np.mean(np.logaddexp(0.0, pred) - targets.vals * pred))


def pseudo_residual(pred, targets: MaskedMatrix, kind: FeedbackKind) -> np.ndarray:
    """Per-cell negative gradient of the loss at ``pred`` (unscaled)."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != targets.vals.shape:
        raise ValueError("prediction vector must align with the masked cells")
    if kind is FeedbackKind.EXPLICIT:
        return targets.vals - pred
    return targets.vals - _sigmoid(pred)


def local_loss(pred, pseudo_targets: MaskedMatrix):
    """Masked mean squared fit loss and its gradient w.r.t. ``pred``.

    Returns ``(loss, grad)`` with grad aligned to the masked cells; cells
    outside the mask never contribute (they are simply not represented).
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pseudo_targets.nnz == 0:
        raise ValueError("local loss over an empty mask is undefined")
    if pred.shape != pseudo_targets.vals.shape:
        raise ValueError("prediction vector must align with the masked cells")
    diff = pred - pseudo_targets.vals
    loss = float(0.5 * np.mean(diff * diff))
    return loss, diff / pseudo_targets.nnz


def rmse(pred, truth: MaskedMatrix) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if truth.nnz == 0:
        raise ValueError("RMSE over an empty mask is undefined")
    if pred.shape != truth.vals.shape:
        raise ValueError("prediction vector must align with the masked cells")
    diff = pred - truth.vals
    return float(np.sqrt(np.mean(diff * diff)))


def average_precision(ranked_relevance) -> float:
    """AP of a ranked 0/1 relevance list: mean of precision at each hit."""
    ranked_relevance = np.asarray(ranked_relevance, dtype=bool)
    hits = np.flatnonzero(ranked_relevance)
    if len(hits) == 0:
        return 0.0
    precisions = (np.arange(len(hits)) + 1.0) / (hits + 1.0)
    return float(precisions.mean())


def map_metric(scores, train_positives, test_positives) -> float:
    """Mean average precision over users with at least one test positive.

    ``scores`` is users x items; each user's candidate list is every item
    except their train positives, ordered by descending score with ties
    broken by ascending item id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_users, n_items = scores.shape
    item_ids = np.arange(n_items)
    aps = []
    for u in range(n_users):
        test_pos = np.asarray(list(test_positives[u]), dtype=np.int64)
        if len(test_pos) == 0:
            continue
        train_pos = np.asarray(list(train_positives[u]), dtype=np.int64)
        if len(np.intersect1d(test_pos, train_pos)) > 0:
            raise ValueError(f"user {u} has a test positive inside train positives")
        keep = np.ones(n_items, dtype=bool)
        keep[train_pos] = False
        cand = item_ids[keep]
        # lexsort keys are last-is-primary: sort by -score, then item id.
        order = np.lexsort((cand, -scores[u, cand]))
        relevant = np.zeros(n_items, dtype=bool)
        relevant[test_pos] = True
        aps.append(average_precision(relevant[cand[order]]))
    if not aps:
        raise ValueError("no user has test positives")
    return float(np.mean(aps))
