"""Threshold-based multi-class decision rule over per-class foreground probabilities."""

from __future__ import annotations

import numpy as np


def threshold_classify(probs: np.ndarray, tau: float) -> np.ndarray:
    """Assign each pixel argmax_c p_c if max_c p_c >= tau, else background (0).

    ``probs`` has shape (C, H, W) (or (C, N)); per-class sigmoid outputs, rows
    independent. Ties break toward the lowest class index. Returns int16 labels
    in {0..C}.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    best = np.argmax(probs, axis=0).astype(np.int16) + 1
    confident = np.max(probs, axis=0) >= tau
    return np.where(confident, best, np.int16(0)).astype(np.int16)
