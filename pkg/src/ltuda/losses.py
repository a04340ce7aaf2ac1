"""Training objectives: partial BCE, prototype-classifier loss (CE + PPD + PPC),
the strong-view composite, and total-loss bookkeeping.

All reductions are means over contributing pixels so values are resolution
independent. Logs are clamped at EPS. Entries masked out of a loss receive
exactly zero gradient (they are excluded before any arithmetic, not weighted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import PartialLabelMap
from .prototypes import PrototypeBank, nearest_class_prototypes, proto_predict

EPS = 1e-7


@dataclass
class LossWeights:
    lambda_ppd: float = 0.001
    lambda_ppc: float = 0.01
    alpha: float = 0.1
    w_lproto: float = 1.0
    w_ulproto: float = 1.0

    def __post_init__(self):
        if min(self.lambda_ppd, self.lambda_ppc, self.w_lproto, self.w_ulproto) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def masked_bce(probs: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over the entries selected by ``valid``.

    Returns 0 (with zero gradient everywhere) when nothing is selected.
    """
    if not valid.any():
        return probs.sum() * 0.0
    p = probs[valid].clamp(EPS, 1.0 - EPS)
    t = targets[valid]
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def partial_bce(probs: torch.Tensor, partial: PartialLabelMap) -> torch.Tensor:
    """Partial BCE for one sample: only the labeled class's known pixels contribute.

    ``probs`` is (C, H, W) sigmoid output.
    """
    targets, valid = partial.binary_view(probs.shape[0])
    return masked_bce(
        probs,
        torch.from_numpy(targets).to(probs.dtype),
        torch.from_numpy(valid),
    )


def hard_label_targets(hard: np.ndarray | torch.Tensor, num_classes: int) -> torch.Tensor:
    """Per-class binary targets from a fully-specified hard label map.

    (H, W) input gives (C, H, W); (B, H, W) gives (B, C, H, W). Foreground
    class c gives target 1 on its own map and 0 on the rest; background pixels
    give 0 on every map.
    """
    if isinstance(hard, np.ndarray):
        hard = torch.from_numpy(np.ascontiguousarray(hard))
    hard = hard.long()
    classes = torch.arange(1, num_classes + 1, device=hard.device)
    if hard.dim() == 2:
        return (hard.unsqueeze(0) == classes.view(-1, 1, 1)).float()
    if hard.dim() == 3:
        return (hard.unsqueeze(1) == classes.view(1, -1, 1, 1)).float()
    raise ValueError(f"expected (H, W) or (B, H, W) labels, got shape {tuple(hard.shape)}")


def hard_ce_multiclass(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean -log pred[target]; ``pred`` rows are distributions over {0..C}.

    ``pred`` is (N, C+1) or (C+1, H, W); ``target`` holds class indices.
    """
    if pred.dim() == 3:
        pred = pred.permute(1, 2, 0).reshape(-1, pred.shape[0])
        target = target.reshape(-1)
    picked = pred.gather(1, target.long().view(-1, 1)).clamp_min(EPS)
    return -torch.log(picked).mean()


def ppd(embeddings: torch.Tensor, assigned_protos: torch.Tensor) -> torch.Tensor:
    """Mean squared cosine gap (1 - i . p)^2 to the assigned prototype.

    Both inputs are (N, D) and unit-normalized.
    """
    sim = (embeddings * assigned_protos).sum(dim=1)
    return ((1.0 - sim) ** 2).mean()


def ppc(
    embeddings: torch.Tensor,
    assigned_flat: torch.Tensor,
    bank: PrototypeBank,
    alpha: float,
) -> torch.Tensor:
    """Pixel-prototype InfoNCE: positive = assigned prototype, negatives = the rest.

    ``assigned_flat`` indexes the bank flattened to ((C+1)*K, D). Returns 0 when
    the bank holds a single prototype (empty negative set).
    """
    protos = bank.protos.reshape(-1, bank.dim)
    if protos.shape[0] <= 1:
        return embeddings.sum() * 0.0
    logits = embeddings @ protos.t() / alpha
    return torch.nn.functional.cross_entropy(logits, assigned_flat.long())


def proto_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    bank: PrototypeBank,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """CE + lambda_ppd * PPD + lambda_ppc * PPC for one prototype classifier.

    ``embeddings`` is (N, D) raw (normalized here); ``labels`` (N,) in {0..C}.
    """
    emb = torch.nn.functional.normalize(embeddings, dim=1)
    pred = proto_predict(emb, bank, normalized=True)
    ce = hard_ce_multiclass(pred, labels)
    k_idx = nearest_class_prototypes(emb, labels, bank)
    flat = labels.long() * bank.num_prototypes + k_idx
    assigned = bank.protos.reshape(-1, bank.dim)[flat]
    l_ppd = ppd(emb, assigned)
    l_ppc = ppc(emb, flat, bank, weights.alpha)
    total = ce + weights.lambda_ppd * l_ppd + weights.lambda_ppc * l_ppc
    return total, {"ce": float(ce.detach()), "ppd": float(l_ppd.detach()), "ppc": float(l_ppc.detach())}


def strong_view_loss(
    linear_probs: torch.Tensor,
    embeddings: torch.Tensor | None,
    pseudo: torch.Tensor,
    labeled_bank: PrototypeBank | None,
    unlabeled_bank: PrototypeBank | None,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Composite loss of one strong view across the three classifier branches.

    The linear branch sees the mixed pseudo-labels as per-class binary targets
    (fully specified, so every entry contributes). Prototype branches are
    active only when their banks are supplied; pass None to reduce to the
    linear branch (stage 1 / warm-up). Accepts single samples ((C, H, W)
    probabilities) or batches ((B, C, H, W)).
    """
    if isinstance(pseudo, np.ndarray):
        pseudo = torch.from_numpy(np.ascontiguousarray(pseudo))
    batched = linear_probs.dim() == 4
    num_classes = linear_probs.shape[1] if batched else linear_probs.shape[0]
    targets = hard_label_targets(pseudo, num_classes).to(linear_probs.dtype)
    linear = masked_bce(linear_probs, targets, torch.ones_like(targets, dtype=torch.bool))
    components = {
        "linear": float(linear.detach()),
        "lproto": 0.0,
        "ulproto": 0.0,
        "ppd": 0.0,
        "ppc": 0.0,
    }
    total = linear
    if labeled_bank is not None or unlabeled_bank is not None:
        if embeddings is None:
            raise ValueError("prototype branches need embeddings")
        dim = embeddings.shape[1] if batched else embeddings.shape[0]
        if batched:
            flat_emb = embeddings.permute(0, 2, 3, 1).reshape(-1, dim)
        else:
            flat_emb = embeddings.permute(1, 2, 0).reshape(-1, dim)
        flat_labels = pseudo.reshape(-1)
        if labeled_bank is not None and weights.w_lproto > 0:
            l_l, comp = proto_loss(flat_emb, flat_labels, labeled_bank, weights)
            total = total + weights.w_lproto * l_l
            components["lproto"] = float(l_l.detach())
            components["ppd"] += comp["ppd"]
            components["ppc"] += comp["ppc"]
        if unlabeled_bank is not None and weights.w_ulproto > 0:
            l_ul, comp = proto_loss(flat_emb, flat_labels, unlabeled_bank, weights)
            total = total + weights.w_ulproto * l_ul
            components["ulproto"] = float(l_ul.detach())
            components["ppd"] += comp["ppd"]
            components["ppc"] += comp["ppc"]
    return total, components


def total_loss(weak_loss: torch.Tensor, strong_losses: list[torch.Tensor]) -> torch.Tensor:
    """Weak-view supervised loss plus the mean over strong views."""
    if not strong_losses:
        return weak_loss
    return weak_loss + torch.stack(list(strong_losses)).mean()
