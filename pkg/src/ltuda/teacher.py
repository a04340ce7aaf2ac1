"""Masked pseudo-labels: teacher predictions on weak views, overwritten by ground truth.

The teacher's thresholded prediction supplies labels for unannotated pixels;
wherever the partial annotation knows the answer it wins. When the teacher
claims the labeled class on a pixel known NOT to be that class, the pixel is
reassigned to the next-best class above the threshold (or straight to
background, per configuration).
"""

from __future__ import annotations

import numpy as np
import torch

from .data import PartialLabelMap
from .inference import threshold_classify

CONFLICT_MODES = ("nextbest", "background")


def make_masked_pseudo(
    teacher_probs: np.ndarray,
    partial: PartialLabelMap,
    tau: float,
    conflict: str = "nextbest",
) -> np.ndarray:
    """Combine thresholded teacher probabilities (C, H, W) with partial ground truth."""
    if conflict not in CONFLICT_MODES:
        raise ValueError(f"conflict must be one of {CONFLICT_MODES}, got {conflict!r}")
    if teacher_probs.shape[1:] != partial.shape:
        raise ValueError(f"probs {teacher_probs.shape} vs labels {partial.shape}")
    pseudo = threshold_classify(teacher_probs, tau)
    lc = partial.labeled_class
    pseudo[partial.classes == lc] = lc
    if partial.known_negative is not None:
        clash = partial.known_negative & (pseudo == lc)
        if np.any(clash):
            if conflict == "background":
                pseudo[clash] = 0
            else:
                rest = teacher_probs.copy()
                rest[lc - 1] = -np.inf
                best = np.argmax(rest, axis=0).astype(np.int16) + 1
                ok = np.max(rest, axis=0) >= tau
                pseudo[clash] = np.where(ok, best, np.int16(0))[clash]
    return pseudo


def teacher_step(
    teacher: torch.nn.Module,
    weak_images: torch.Tensor,
    partials: list[PartialLabelMap],
    tau: float,
    conflict: str = "nextbest",
) -> list[np.ndarray]:
    """Masked pseudo-labels for a weakly augmented batch; no gradients flow."""
    teacher.eval()
    with torch.no_grad():
        _, probs = teacher(weak_images)
    probs_np = probs.cpu().numpy()
    return [
        make_masked_pseudo(probs_np[i], partials[i], tau, conflict)
        for i in range(len(partials))
    ]
