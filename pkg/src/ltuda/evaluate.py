"""Segmentation metrics (Dice, Hausdorff distance) and feature-compactness diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_erosion
from scipy.spatial.distance import directed_hausdorff

from .data import SampleDataset
from .inference import threshold_classify

RATIO_CAP = 1e9


def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|A^B| / (|A|+|B|); 1.0 when both masks are empty, 0.0 when exactly one is."""
    a = pred == cls
    b = gt == cls
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with a 4-neighbor outside the mask (or the image)."""
    if not mask.any():
        return np.zeros((0, 2), dtype=np.int64)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    interior = binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def hausdorff(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Symmetric Hausdorff distance between boundary point sets, in pixels.

    NaN when either mask is empty (excluded from aggregate means).
    """
    a = boundary_points(pred == cls)
    b = boundary_points(gt == cls)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return float("nan")
    d_ab = directed_hausdorff(a, b)[0]
    d_ba = directed_hausdorff(b, a)[0]
    return float(max(d_ab, d_ba))


@dataclass
class FeatureVariance:
    intra: dict[int, float]  # class -> mean squared distance to the class mean
    mean_intra: float
    inter: float  # mean squared pairwise distance between class means
    ratio: float


def feature_variance(embeddings: np.ndarray, labels: np.ndarray) -> FeatureVariance:
    """Intra-/inter-class variance of L2-normalized embeddings.

    ``embeddings`` is (N, D), ``labels`` (N,) in {0..C}. The ratio
    inter / mean-intra is capped at RATIO_CAP.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.clip(norms, 1e-12, None)
    labels = np.asarray(labels).reshape(-1)
    intra: dict[int, float] = {}
    means = {}
    for cls in np.unique(labels).tolist():
        pts = emb[labels == cls]
        m = pts.mean(axis=0)
        means[cls] = m
        intra[int(cls)] = float(((pts - m) ** 2).sum(axis=1).mean())
    mean_intra = float(np.mean(list(intra.values())))
    keys = sorted(means)
    pair_d2 = [
        float(((means[a] - means[b]) ** 2).sum())
        for i, a in enumerate(keys)
        for b in keys[i + 1 :]
    ]
    inter = float(np.mean(pair_d2)) if pair_d2 else 0.0
    if mean_intra <= 0.0:
        ratio = RATIO_CAP if inter > 0 else 0.0
    else:
        ratio = min(inter / mean_intra, RATIO_CAP)
    return FeatureVariance(intra=intra, mean_intra=mean_intra, inter=inter, ratio=ratio)


@dataclass
class ClassMetrics:
    dice: float
    hd: float  # NaN-excluded mean; NaN if never defined
    n_images: int


@dataclass
class MetricReport:
    per_class: dict[int, ClassMetrics]
    mean_dice: float
    mean_hd: float

    def to_dict(self) -> dict:
        return {
            "per_class": {
                str(c): {"dice": m.dice, "hd": m.hd, "n_images": m.n_images}
                for c, m in self.per_class.items()
            },
            "mean_dice": self.mean_dice,
            "mean_hd": self.mean_hd,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "dice", "hd", "n_images"])
            for cls in sorted(self.per_class):
                m = self.per_class[cls]
                writer.writerow([cls, repr(m.dice), repr(m.hd), m.n_images])
            writer.writerow(["mean", repr(self.mean_dice), repr(self.mean_hd), ""])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def score_predictions(
    preds: list[np.ndarray], gts: list[np.ndarray], num_classes: int
) -> MetricReport:
    """Per-class and mean Dice/HD over paired prediction/ground-truth label maps."""
    per_class = {}
    for cls in range(1, num_classes + 1):
        dices = [dice(p, g, cls) for p, g in zip(preds, gts)]
        hds = [hausdorff(p, g, cls) for p, g in zip(preds, gts)]
        finite = [h for h in hds if not math.isnan(h)]
        per_class[cls] = ClassMetrics(
            dice=float(np.mean(dices)),
            hd=float(np.mean(finite)) if finite else float("nan"),
            n_images=len(dices),
        )
    mean_dice = float(np.mean([m.dice for m in per_class.values()]))
    finite_hd = [m.hd for m in per_class.values() if not math.isnan(m.hd)]
    mean_hd = float(np.mean(finite_hd)) if finite_hd else float("nan")
    return MetricReport(per_class=per_class, mean_dice=mean_dice, mean_hd=mean_hd)


@torch.no_grad()
def predict_dataset(
    model: torch.nn.Module, dataset: SampleDataset, tau: float
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Hard label maps and flattened embeddings for every record with a full label."""
    model.eval()
    preds, embs = [], []
    for rec in dataset.records:
        x = torch.from_numpy(rec.image).float().unsqueeze(0).unsqueeze(0)
        emb, probs = model(x)
        preds.append(threshold_classify(probs[0].cpu().numpy(), tau))
        embs.append(emb[0].cpu().numpy())
    return preds, embs


def evaluate_model(model: torch.nn.Module, dataset: SampleDataset, tau: float) -> MetricReport:
    preds, _ = predict_dataset(model, dataset, tau)
    gts = [rec.full_label for rec in dataset.records]
    if any(g is None for g in gts):
        raise ValueError("evaluation requires full labels on every record")
    return score_predictions(preds, gts, dataset.num_classes)


def embedding_variance(model: torch.nn.Module, dataset: SampleDataset) -> FeatureVariance:
    """Feature-compactness diagnostics over a dataset, classes from full labels."""
    _, embs = predict_dataset(model, dataset, tau=0.5)
    flat_emb = np.concatenate([e.reshape(e.shape[0], -1).T for e in embs], axis=0)
    flat_lab = np.concatenate([rec.full_label.reshape(-1) for rec in dataset.records])
    return feature_variance(flat_emb, flat_lab)


def evaluate_run(
    ckpt_path,
    data,
    tau: float | None = None,
    which: str | None = None,
    out_json: str | Path | None = None,
    out_csv: str | Path | None = None,
) -> MetricReport:
    """Score a checkpoint against a dataset's full labels; optionally write reports."""
    from .trainer import build_model_from_checkpoint, load_checkpoint

    state = load_checkpoint(ckpt_path)
    cfg = state["config"]
    model = build_model_from_checkpoint(state, which=which or cfg["eval"]["model"])
    dataset = data if isinstance(data, SampleDataset) else SampleDataset.from_manifest(data)
    report = evaluate_model(model, dataset, cfg["tau"] if tau is None else tau)
    if out_json is not None:
        report.write_json(out_json)
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
