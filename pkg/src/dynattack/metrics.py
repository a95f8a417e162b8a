"""Link-prediction scores over unordered node pairs (strict upper triangle)."""

from __future__ import annotations

import numpy as np


def _pairs(predicted, truth):
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    iu = np.triu_indices(p.shape[0], k=1)
    return p[iu].astype(bool), t[iu].astype(bool)


def confusion(predicted, truth) -> tuple[int, int, int]:
    """``(tp, fp, fn)`` over unordered pairs, edge present = positive."""
    p, t = _pairs(predicted, truth)
    return int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t))


def f1_score(predicted, truth) -> float:
    tp, fp, fn = confusion(predicted, truth)
    if tp == 0:
        # two empty graphs agree perfectly; anything else without a hit scores 0
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def mismatch_count(predicted, truth) -> int:
    """Number of unordered pairs on which the two graphs disagree."""
    p, t = _pairs(predicted, truth)
    return int(np.sum(p != t))
