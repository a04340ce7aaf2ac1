"""Partially-labeled segmentation datasets: types, synthetic generator, disk format, sampling.

A dataset is a union of subsets; subset ``i`` annotates exactly one foreground
class (its ``labeled_class``) and leaves every other pixel unknown (``-1``).
Images are float32 grids in [-1, 1]; label grids are int16. The synthetic
generator draws one parametric shape per class (ellipse, rectangle, annulus,
crescent) on a noisy background, keeps the full label around for evaluation,
and reveals only the subset's own class in the partial label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

SHAPE_KINDS = ("ellipse", "rectangle", "annulus", "crescent")


class DatasetError(Exception):
    """Raised on malformed manifests, missing files, or out-of-range label values."""


class GenerationError(Exception):
    """Raised when non-overlapping shape placement fails after bounded retries."""


@dataclass
class PartialLabelMap:
    """Per-pixel annotation for one sample of a single-class subset.

    ``classes`` holds ``labeled_class`` where that organ is present and -1
    everywhere else. ``known_negative`` optionally marks pixels known NOT to be
    the labeled class (the generator marks all non-organ pixels, matching the
    binary-map semantics of single-organ datasets).
    """

    classes: np.ndarray
    labeled_class: int
    known_negative: np.ndarray | None = None

    def __post_init__(self):
        if self.labeled_class < 1:
            raise ValueError(f"labeled_class must be >= 1, got {self.labeled_class}")
        vals = np.unique(self.classes)
        bad = vals[(vals != -1) & (vals != self.labeled_class)]
        if bad.size:
            raise ValueError(
                f"partial label contains foreign values {bad.tolist()} "
                f"(labeled_class={self.labeled_class})"
            )
        if self.known_negative is not None:
            if self.known_negative.shape != self.classes.shape:
                raise ValueError("known_negative shape mismatch")
            if bool(np.any(self.known_negative & (self.classes == self.labeled_class))):
                raise ValueError("known_negative overlaps positive pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def binary_view(self, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-class binary targets and validity mask, shapes (C, H, W).

        targets[c] = 1 where the pixel is class c+1, else 0; valid[c] marks the
        (pixel, class) entries that carry supervision: positives of the labeled
        class plus its known negatives. Everything else is unknown.
        """
        h, w = self.classes.shape
        targets = np.zeros((num_classes, h, w), dtype=np.float32)
        valid = np.zeros((num_classes, h, w), dtype=bool)
        c = self.labeled_class - 1
        pos = self.classes == self.labeled_class
        targets[c][pos] = 1.0
        valid[c] = pos if self.known_negative is None else (pos | self.known_negative)
        return targets, valid


@dataclass
class SampleRecord:
    """One training sample: image, partial annotation, and (eval-only) full label."""

    image: np.ndarray
    partial_label: PartialLabelMap
    subset_id: int
    full_label: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class SamplePaths:
    image: str
    partial_label: str
    known_negative: str
    full_label: str


@dataclass
class SubsetEntry:
    subset_id: int
    labeled_class: int
    samples: list[SamplePaths] = field(default_factory=list)


@dataclass
class DatasetManifest:
    num_classes: int
    image_size: tuple[int, int]
    seed: int
    subsets: list[SubsetEntry] = field(default_factory=list)
    root: Path | None = None

    def n_samples(self) -> int:
        return sum(len(s.samples) for s in self.subsets)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "C": self.num_classes,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "subsets": [
                {
                    "subset_id": s.subset_id,
                    "labeled_class": s.labeled_class,
                    "samples": [
                        {
                            "image": p.image,
                            "partial_label": p.partial_label,
                            "known_negative": p.known_negative,
                            "full_label": p.full_label,
                        }
                        for p in s.samples
                    ],
                }
                for s in self.subsets
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        try:
            version = d["version"]
            if version != MANIFEST_VERSION:
                raise DatasetError(f"unsupported manifest version {version}")
            subsets = [
                SubsetEntry(
                    subset_id=int(s["subset_id"]),
                    labeled_class=int(s["labeled_class"]),
                    samples=[
                        SamplePaths(
                            image=p["image"],
                            partial_label=p["partial_label"],
                            known_negative=p["known_negative"],
                            full_label=p["full_label"],
                        )
                        for p in s["samples"]
                    ],
                )
                for s in d["subsets"]
            ]
            m = cls(
                num_classes=int(d["C"]),
                image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
                seed=int(d["seed"]),
                subsets=subsets,
                root=root,
            )
        except (KeyError, TypeError, IndexError) as e:
            raise DatasetError(f"malformed manifest: {e!r}") from e
        labeled = {s.labeled_class for s in m.subsets}
        missing = set(range(1, m.num_classes + 1)) - labeled
        if missing:
            raise DatasetError(f"classes {sorted(missing)} have no labeling subset")
        return m


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

BG_BASE = -0.35
BG_NOISE = 0.05
SHAPE_NOISE = 0.05
# Last class is always drawn close to the background level so one class stays
# genuinely hard to separate by intensity alone.
LOW_CONTRAST_OFFSET = 0.14
# Per-image global gain/offset jitter (acquisition variation across images):
# absolute intensity is not a reliable cue, local contrast is.
GAIN_RANGE = (0.9, 1.1)
OFFSET_RANGE = (-0.12, 0.12)


def _class_intensity(cls: int, num_classes: int) -> float:
    if cls == num_classes:
        return BG_BASE + LOW_CONTRAST_OFFSET
    if num_classes <= 2:
        return 0.45
    return 0.15 + 0.6 * (cls - 1) / (num_classes - 2)


def _raster_shape(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one randomly-parameterized shape as a boolean mask."""
    s = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0.2 * h, 0.8 * h)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    theta = rng.uniform(0.0, np.pi)
    u = np.cos(theta) * (yy - cy) + np.sin(theta) * (xx - cx)
    v = -np.sin(theta) * (yy - cy) + np.cos(theta) * (xx - cx)
    if kind == "ellipse":
        a = rng.uniform(0.10, 0.16) * s
        b = rng.uniform(0.07, 0.13) * s
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        hw = rng.uniform(0.08, 0.15) * s
        hh = rng.uniform(0.06, 0.12) * s
        return (np.abs(u) <= hh) & (np.abs(v) <= hw)
    if kind == "annulus":
        outer = rng.uniform(0.11, 0.17) * s
        inner = max(1.0, outer * rng.uniform(0.40, 0.60))
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= outer**2) & (d2 > inner**2)
    if kind == "crescent":
        r = rng.uniform(0.14, 0.20) * s
        off = rng.uniform(0.45, 0.75) * r
        phi = rng.uniform(0.0, 2 * np.pi)
        carve_r = rng.uniform(0.75, 0.95) * r
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        oy, ox = cy + off * np.sin(phi), cx + off * np.cos(phi)
        c2 = (yy - oy) ** 2 + (xx - ox) ** 2
        return (d2 <= r**2) & (c2 > carve_r**2)
    raise ValueError(f"unknown shape kind {kind!r}")


def make_image(
    num_classes: int, image_size: tuple[int, int], rng: np.random.Generator, max_tries: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one image with ``num_classes`` non-overlapping shapes.

    Returns (image float32 in [-1, 1], full_label int16 in {0..C}).
    """
    h, w = image_size
    image = BG_BASE + rng.normal(0.0, BG_NOISE, size=(h, w))
    full = np.zeros((h, w), dtype=np.int16)
    occupied = np.zeros((h, w), dtype=bool)
    for cls in range(1, num_classes + 1):
        kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
        for attempt in range(max_tries):
            mask = _raster_shape(kind, h, w, rng)
            if mask.sum() < 8:
                continue
            if not np.any(binary_dilation(mask) & occupied):
                break
        else:
            raise GenerationError(
                f"could not place class {cls} ({kind}) without overlap after {max_tries} tries"
            )
        base = _class_intensity(cls, num_classes) + rng.normal(0.0, 0.03)
        image[mask] = base + rng.normal(0.0, SHAPE_NOISE, size=int(mask.sum()))
        full[mask] = cls
        occupied |= mask
    gain = rng.uniform(*GAIN_RANGE)
    offset = rng.uniform(*OFFSET_RANGE)
    image = gain * image + offset
    return np.clip(image, -1.0, 1.0).astype(np.float32), full


def generate_synthetic(
    num_classes: int,
    n_per_subset: int,
    image_size: tuple[int, int],
    seed: int,
    out_dir: str | Path,
) -> DatasetManifest:
    """Generate and write a partially-labeled synthetic dataset.

    One subset per class, ``n_per_subset`` images each; subset ``i`` reveals
    only class ``i`` in its partial labels, with all non-organ pixels marked as
    known negatives. Deterministic for a fixed seed.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_subset < 1:
        raise ValueError("need at least 1 sample per subset")
    h, w = image_size
    if h < 32 or w < 32:
        raise ValueError("image_size must be at least 32x32")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(num_classes=num_classes, image_size=(h, w), seed=seed, root=out)
    for cls in range(1, num_classes + 1):
        subset = SubsetEntry(subset_id=cls - 1, labeled_class=cls)
        sub_dir = out / f"subset_{subset.subset_id}"
        sub_dir.mkdir(exist_ok=True)
        for j in range(n_per_subset):
            image, full = make_image(num_classes, (h, w), rng)
            partial = np.where(full == cls, cls, -1).astype(np.int16)
            kneg = (full != cls).astype(np.int16)
            stem = f"sample_{j:04d}"
            paths = SamplePaths(
                image=f"subset_{subset.subset_id}/{stem}_image.bin",
                partial_label=f"subset_{subset.subset_id}/{stem}_partial.bin",
                known_negative=f"subset_{subset.subset_id}/{stem}_kneg.bin",
                full_label=f"subset_{subset.subset_id}/{stem}_full.bin",
            )
            image.astype("<f4").tofile(out / paths.image)
            partial.astype("<i2").tofile(out / paths.partial_label)
            kneg.astype("<i2").tofile(out / paths.known_negative)
            full.astype("<i2").tofile(out / paths.full_label)
            subset.samples.append(paths)
        manifest.subsets.append(subset)
    save_manifest(manifest, out)
    return manifest


# ---------------------------------------------------------------------------
# Disk round trip
# ---------------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    target = path / MANIFEST_NAME if path.is_dir() or path.suffix != ".json" else path
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return target


def _read_grid(root: Path, rel: str, dtype: str, shape: tuple[int, int]) -> np.ndarray:
    fp = root / rel
    if not fp.exists():
        raise DatasetError(f"missing data file: {fp}")
    arr = np.fromfile(fp, dtype=dtype)
    if arr.size != shape[0] * shape[1]:
        raise DatasetError(f"{fp}: expected {shape[0] * shape[1]} values, found {arr.size}")
    return arr.reshape(shape)


def load_manifest(path: str | Path, validate: bool = True) -> DatasetManifest:
    """Load a manifest; with ``validate`` also check files, shapes, and label ranges."""
    path = Path(path)
    target = path / MANIFEST_NAME if path.is_dir() else path
    if not target.exists():
        raise DatasetError(f"missing manifest: {target}")
    manifest = DatasetManifest.from_dict(json.loads(target.read_text()), root=target.parent)
    if validate:
        for subset in manifest.subsets:
            for idx in range(len(subset.samples)):
                load_sample(manifest, subset.subset_id, idx)
    return manifest


def load_sample(manifest: DatasetManifest, subset_id: int, index: int) -> SampleRecord:
    if manifest.root is None:
        raise DatasetError("manifest has no root directory; load it from disk first")
    subset = next((s for s in manifest.subsets if s.subset_id == subset_id), None)
    if subset is None:
        raise DatasetError(f"no subset with id {subset_id}")
    paths = subset.samples[index]
    shape = manifest.image_size
    image = _read_grid(manifest.root, paths.image, "<f4", shape)
    partial = _read_grid(manifest.root, paths.partial_label, "<i2", shape)
    kneg = _read_grid(manifest.root, paths.known_negative, "<i2", shape)
    full = _read_grid(manifest.root, paths.full_label, "<i2", shape)
    if np.any((full < 0) | (full > manifest.num_classes)):
        raise DatasetError(f"{manifest.root / paths.full_label}: label values outside 0..C")
    ok = (partial == -1) | (partial == subset.labeled_class)
    if not ok.all():
        raise DatasetError(
            f"{manifest.root / paths.partial_label}: values outside "
            f"{{-1, {subset.labeled_class}}}"
        )
    try:
        plm = PartialLabelMap(
            classes=partial, labeled_class=subset.labeled_class, known_negative=kneg.astype(bool)
        )
    except ValueError as e:
        raise DatasetError(str(e)) from e
    return SampleRecord(image=image, partial_label=plm, subset_id=subset_id, full_label=full)


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


class SampleDataset:
    """In-memory view of a dataset: the union of all subsets' samples."""

    def __init__(self, records: list[SampleRecord], num_classes: int, image_size: tuple[int, int]):
        if not records:
            raise DatasetError("empty dataset")
        self.records = records
        self.num_classes = num_classes
        self.image_size = image_size

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest | str | Path) -> "SampleDataset":
        if not isinstance(manifest, DatasetManifest):
            manifest = load_manifest(manifest)
        records = [
            load_sample(manifest, s.subset_id, i)
            for s in manifest.subsets
            for i in range(len(s.samples))
        ]
        return cls(records, manifest.num_classes, manifest.image_size)

    def __len__(self) -> int:
        return len(self.records)


def sample_batch(
    dataset: SampleDataset, batch_size: int, rng: np.random.Generator
) -> list[SampleRecord]:
    """Uniformly sample ``batch_size`` records (with replacement) from the pool."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (strong mixing needs pairs)")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return [dataset.records[i] for i in idx]
