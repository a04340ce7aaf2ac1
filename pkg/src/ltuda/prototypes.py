"""Dual prototype banks with momentum online clustering and nearest-prototype prediction.

Each bank keeps K unit-norm prototypes per class (background included). Class
pixels are hard-assigned to their nearest same-class prototype; per-slot means
are blended into the bank with momentum and re-normalized. A class's slots are
seeded k-means++-style from the first batch in which it appears. The labeled
bank never sees ground-truth background, so its background prototypes are
copied from the unlabeled bank after every update.
"""

from __future__ import annotations

import numpy as np
import torch

IGNORE = -1


class UninitializedBankError(RuntimeError):
    """Prediction was requested from a bank with unseeded prototype slots."""


class PrototypeBank:
    def __init__(self, num_classes: int, num_prototypes: int, dim: int, momentum: float = 0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.num_classes = num_classes  # foreground classes; bank rows = C + 1
        self.num_prototypes = num_prototypes
        self.dim = dim
        self.momentum = momentum
        self.protos = torch.zeros(num_classes + 1, num_prototypes, dim)
        self.initialized = torch.zeros(num_classes + 1, num_prototypes, dtype=torch.bool)

    @property
    def fully_initialized(self) -> bool:
        return bool(self.initialized.all())

    def state_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_prototypes": self.num_prototypes,
            "dim": self.dim,
            "momentum": self.momentum,
            "protos": self.protos.clone(),
            "initialized": self.initialized.clone(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "PrototypeBank":
        bank = cls(state["num_classes"], state["num_prototypes"], state["dim"], state["momentum"])
        bank.protos = state["protos"].clone()
        bank.initialized = state["initialized"].clone()
        return bank


def proto_predict(
    embeddings: torch.Tensor, bank: PrototypeBank, normalized: bool = False
) -> torch.Tensor:
    """Softmax over classes of the nearest-prototype cosine similarity.

    ``embeddings`` is (N, D) or (D, H, W); the output matches ((N, C+1) or
    (C+1, H, W)) and its rows sum to 1. Embeddings are L2-normalized here
    unless the caller already did.
    """
    if not bank.fully_initialized:
        raise UninitializedBankError("prototype bank has unseeded slots")
    spatial = embeddings.dim() == 3
    if spatial:
        d, h, w = embeddings.shape
        emb = embeddings.permute(1, 2, 0).reshape(-1, d)
    else:
        emb = embeddings
    if not normalized:
        emb = torch.nn.functional.normalize(emb, dim=1)
    sims = emb @ bank.protos.reshape(-1, bank.dim).t()
    best = sims.reshape(-1, bank.num_classes + 1, bank.num_prototypes).max(dim=2).values
    probs = torch.softmax(best, dim=1)
    if spatial:
        probs = probs.reshape(h, w, -1).permute(2, 0, 1)
    return probs


def nearest_class_prototypes(
    embeddings: torch.Tensor, labels: torch.Tensor, bank: PrototypeBank
) -> torch.Tensor:
    """Index k of each pixel's nearest prototype within its own class row.

    ``embeddings`` (N, D) normalized, ``labels`` (N,) in {0..C}. No gradients.
    """
    with torch.no_grad():
        sims = embeddings.detach() @ bank.protos.reshape(-1, bank.dim).t()
        sims = sims.reshape(-1, bank.num_classes + 1, bank.num_prototypes)
        per_class = sims[torch.arange(sims.shape[0]), labels.long()]
        return per_class.argmax(dim=1)


def _kmeanspp_seed(
    pixels: torch.Tensor, k: int, rng: np.random.Generator
) -> torch.Tensor:
    """k-means++ style seeding over unit vectors (squared chord distance weights)."""
    n = pixels.shape[0]
    first = int(rng.integers(0, n))
    centers = [pixels[first]]
    for _ in range(1, k):
        sims = torch.stack([pixels @ c for c in centers], dim=1)
        d2 = (2.0 - 2.0 * sims.max(dim=1).values).clamp_min(0.0).double()
        total = float(d2.sum())
        if total <= 0.0:
            centers.append(pixels[int(rng.integers(0, n))])
            continue
        probs = (d2 / total).cpu().numpy()
        probs = probs / probs.sum()
        centers.append(pixels[int(rng.choice(n, p=probs))])
    return torch.stack(centers)


@torch.no_grad()
def update_bank(
    bank: PrototypeBank,
    embeddings: torch.Tensor,
    labels: torch.Tensor | np.ndarray,
    rng: np.random.Generator,
) -> None:
    """Momentum update of a bank from one batch of (embedding, class) pixels.

    ``labels`` may contain IGNORE (-1) for pixels that do not feed this bank.
    Per present class: hard-assign pixels to their nearest class prototype,
    average, normalize, blend with momentum, re-normalize. Momentum 1 freezes
    the bank. Unseen (class, k) slots stay untouched.
    """
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(np.ascontiguousarray(labels))
    labels = labels.long().reshape(-1)
    if embeddings.dim() == 3:
        embeddings = embeddings.permute(1, 2, 0).reshape(-1, embeddings.shape[0])
    embeddings = embeddings.detach()
    used = labels != IGNORE
    if not bool(used.any()):
        return
    emb = torch.nn.functional.normalize(embeddings[used], dim=1)
    labs = labels[used]
    for cls in torch.unique(labs).tolist():
        pixels = emb[labs == cls]
        if not bool(bank.initialized[cls].all()):
            seeds = _kmeanspp_seed(pixels, bank.num_prototypes, rng)
            bank.protos[cls] = torch.nn.functional.normalize(seeds, dim=1)
            bank.initialized[cls] = True
            continue
        if bank.momentum == 1.0:
            continue
        sims = pixels @ bank.protos[cls].t()
        assign = sims.argmax(dim=1)
        for k in torch.unique(assign).tolist():
            mean = pixels[assign == k].mean(dim=0)
            fresh = torch.nn.functional.normalize(mean, dim=0)
            blended = bank.momentum * bank.protos[cls, k] + (1.0 - bank.momentum) * fresh
            bank.protos[cls, k] = torch.nn.functional.normalize(blended, dim=0)


def build_labeled_bank_inputs(partial: np.ndarray, pseudo: np.ndarray) -> np.ndarray:
    """Update targets for the labeled bank: ground-truth foreground pixels only.

    Background never has ground truth; its slots are filled via
    ``copy_background``. ``pseudo`` is accepted for signature symmetry with the
    unlabeled side but foreground ground truth alone decides.
    """
    del pseudo
    return np.where(partial > 0, partial, IGNORE).astype(np.int64)


def build_unlabeled_bank_inputs(partial: np.ndarray, pseudo: np.ndarray) -> np.ndarray:
    """Update targets for the unlabeled bank: pseudo-labels on unannotated pixels."""
    return np.where(partial == IGNORE, pseudo, IGNORE).astype(np.int64)


def copy_background(labeled: PrototypeBank, unlabeled: PrototypeBank) -> None:
    """Copy rule: labeled bank's background prototypes mirror the unlabeled bank's."""
    labeled.protos[0] = unlabeled.protos[0].clone()
    labeled.initialized[0] = unlabeled.initialized[0].clone()
