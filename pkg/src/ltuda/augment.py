"""Weak (rotation/scaling) and strong (cross-set CutMix) augmentation.

Weak transforms act jointly on the image (bilinear) and every label grid
(nearest); regions rotated/scaled in from outside the canvas get the image's
background fill and the unknown label. Strong augmentation cuts a rectangular
patch from a partner sample and pastes it at the same position, mixing images,
pseudo-labels, and partial ground truth with the same binary mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import PartialLabelMap, SampleRecord


@dataclass
class WeakAugSpec:
    angle: float  # degrees, counterclockwise
    scale: float


@dataclass
class MixSpec:
    """One CutMix application: pre-clip box, area ratio, and realized mask."""

    box: tuple[int, int, int, int]  # (r_x, r_y, r_w, r_h), clipping happens in `mask`
    lam: float
    mask: np.ndarray  # bool (H, W), True inside the pasted region
    partner_index: int = -1


@dataclass
class StrongView:
    """A mixed sample: image, mixed masked pseudo-labels, mixed partial ground truth."""

    image: np.ndarray
    pseudo: np.ndarray  # int16 (H, W) in {0..C}
    partial: np.ndarray  # int16 (H, W), -1 where no ground truth survives the mix
    spec: MixSpec


def sample_weak_spec(
    rng: np.random.Generator, max_angle: float, scale_range: tuple[float, float]
) -> WeakAugSpec:
    return WeakAugSpec(
        angle=float(rng.uniform(-max_angle, max_angle)),
        scale=float(rng.uniform(scale_range[0], scale_range[1])),
    )


def _affine_coords(h: int, w: int, angle: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates for each output pixel under rotate-then-scale about the center."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = math.radians(angle)
    cos, sin = math.cos(rad), math.sin(rad)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = yy - cy, xx - cx
    # inverse map: rotate by -angle, divide by scale
    src_y = cy + (cos * u + sin * v) / scale
    src_x = cx + (-sin * u + cos * v) / scale
    return src_y, src_x


def _warp_nearest(grid: np.ndarray, src_y: np.ndarray, src_x: np.ndarray, fill) -> np.ndarray:
    h, w = grid.shape
    iy = np.rint(src_y).astype(np.int64)
    ix = np.rint(src_x).astype(np.int64)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.full(grid.shape, fill, dtype=grid.dtype)
    out[inside] = grid[iy[inside], ix[inside]]
    return out


def _warp_bilinear(grid: np.ndarray, src_y: np.ndarray, src_x: np.ndarray, fill: float) -> np.ndarray:
    h, w = grid.shape
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    inside = (src_y >= 0) & (src_y <= h - 1) & (src_x >= 0) & (src_x <= w - 1)
    y0c = np.clip(y0, 0, h - 2)
    x0c = np.clip(x0, 0, w - 2)
    dy = src_y - y0c
    dx = src_x - x0c
    g = grid.astype(np.float64)
    val = (
        g[y0c, x0c] * (1 - dy) * (1 - dx)
        + g[y0c + 1, x0c] * dy * (1 - dx)
        + g[y0c, x0c + 1] * (1 - dy) * dx
        + g[y0c + 1, x0c + 1] * dy * dx
    )
    out = np.where(inside, val, fill)
    return out.astype(grid.dtype)


def weak_augment(record: SampleRecord, spec: WeakAugSpec) -> SampleRecord:
    """Rotate/scale a sample; image bilinear, labels nearest, sentinel preserved."""
    h, w = record.image.shape
    if spec.angle == 0.0 and spec.scale == 1.0:
        return record
    src_y, src_x = _affine_coords(h, w, spec.angle, spec.scale)
    fill = float(np.median(record.image))
    image = _warp_bilinear(record.image, src_y, src_x, fill)
    plm = record.partial_label
    classes = _warp_nearest(plm.classes, src_y, src_x, np.int16(-1))
    kneg = None
    if plm.known_negative is not None:
        kneg = _warp_nearest(plm.known_negative, src_y, src_x, False)
    full = None
    if record.full_label is not None:
        full = _warp_nearest(record.full_label, src_y, src_x, np.int16(0))
    return SampleRecord(
        image=image,
        partial_label=PartialLabelMap(classes, plm.labeled_class, kneg),
        subset_id=record.subset_id,
        full_label=full,
    )


def mixspec_from_lam(h: int, w: int, lam: float, r_x: int, r_y: int) -> MixSpec:
    """Box sizes from the area ratio: r_w = round(W*sqrt(1-lam)), clipped mask."""
    side = math.sqrt(1.0 - lam)
    r_w = int(round(w * side))
    r_h = int(round(h * side))
    mask = np.zeros((h, w), dtype=bool)
    mask[r_y : min(r_y + r_h, h), r_x : min(r_x + r_w, w)] = True
    return MixSpec(box=(r_x, r_y, r_w, r_h), lam=lam, mask=mask)


def sample_mixspec(h: int, w: int, rng: np.random.Generator) -> MixSpec:
    """Sample a mixing box: lam ~ U(0,1), corner uniform over the canvas."""
    lam = float(rng.uniform(0.0, 1.0))
    r_x = int(rng.integers(0, w))
    r_y = int(rng.integers(0, h))
    return mixspec_from_lam(h, w, lam, r_x, r_y)


def mix_grids(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise (1-M)*a + M*b for a binary mask; exact pixel selection."""
    if a.shape != b.shape or a.shape != mask.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} vs {mask.shape}")
    return np.where(mask, b, a)


def cutmix(
    a_image: np.ndarray,
    a_pseudo: np.ndarray,
    a_partial: np.ndarray,
    b_image: np.ndarray,
    b_pseudo: np.ndarray,
    b_partial: np.ndarray,
    spec: MixSpec,
) -> StrongView:
    """Paste the masked region of sample b into sample a, same position."""
    return StrongView(
        image=mix_grids(a_image, b_image, spec.mask),
        pseudo=mix_grids(a_pseudo, b_pseudo, spec.mask),
        partial=mix_grids(a_partial, b_partial, spec.mask),
        spec=spec,
    )


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation of range(n) with no fixed points (n >= 2)."""
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def strong_views(
    records: list[SampleRecord],
    pseudos: list[np.ndarray],
    num_views: int,
    rng: np.random.Generator,
) -> list[list[StrongView]]:
    """Build ``num_views`` independently mixed versions of a weakly augmented batch.

    Each view draws its own partner derangement and a fresh box per sample.
    """
    if num_views < 1:
        raise ValueError("num_views must be >= 1")
    n = len(records)
    if n < 2:
        raise ValueError("strong mixing needs a batch of at least 2")
    h, w = records[0].image.shape
    partials = [r.partial_label.classes for r in records]
    images = [r.image for r in records]
    views = []
    for _ in range(num_views):
        perm = _derangement(n, rng)
        batch = []
        for i in range(n):
            j = int(perm[i])
            spec = replace(sample_mixspec(h, w, rng), partner_index=j)
            batch.append(
                cutmix(images[i], pseudos[i], partials[i], images[j], pseudos[j], partials[j], spec)
            )
        views.append(batch)
    return views


class Mixer:
    """Extension hook for alternative region-mixing strategies; CutMix is the default."""

    name = "cutmix"

    def sample_spec(self, h: int, w: int, rng: np.random.Generator) -> MixSpec:
        return sample_mixspec(h, w, rng)
