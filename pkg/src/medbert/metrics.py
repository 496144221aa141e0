"""Area under the ROC curve by exact pair counting."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateLabels


def compute_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting 1/2.

    For every positive score the number of strictly lower and of equal
    negative scores is counted with a binary search over the sorted
    negatives, so the result is the exact Mann-Whitney count divided by
    ``n_pos * n_neg``.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabels(f"need both classes, got {pos.size} positive / {neg.size} negative")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    twice_u = int(2 * below.sum() + ties.sum())
    return (twice_u / 2) / (pos.size * neg.size)
