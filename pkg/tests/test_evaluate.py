import math

import numpy as np
import pytest
import torch

from conftest import PlantedModel, planted_probs
from ltuda.evaluate import (
    FeatureVariance,
    boundary_points,
    dice,
    evaluate_model,
    feature_variance,
    hausdorff,
    score_predictions,
)


def test_dice_basic_cases():
    a = np.zeros((5, 5), dtype=np.int16)
    a[1:3, 1:3] = 1
    assert dice(a, a.copy(), 1) == 1.0
    b = np.zeros_like(a)
    b[3:5, 3:5] = 1
    assert dice(a, b, 1) == 0.0
    assert dice(a, b, 2) == 1.0  # both empty


def test_dice_formula_on_counts():
    a = np.zeros((4, 4), dtype=np.int16)
    b = np.zeros((4, 4), dtype=np.int16)
    a[0, 0:4] = 1  # 4 px
    b[0, 2:4] = 1
    b[1, 0:2] = 1  # 4 px, overlap 2
    assert dice(a, b, 1) == pytest.approx(2 * 2 / (4 + 4))


def test_hausdorff_identical_and_point_pair():
    a = np.zeros((8, 8), dtype=np.int16)
    a[2:5, 2:5] = 1
    assert hausdorff(a, a.copy(), 1) == 0.0
    p = np.zeros((8, 8), dtype=np.int16)
    q = np.zeros((8, 8), dtype=np.int16)
    p[0, 0] = 1
    q[3, 4] = 1  # distance 5
    assert hausdorff(p, q, 1) == pytest.approx(5.0)
    assert math.isnan(hausdorff(p, np.zeros_like(q), 1))


def _brute_force_hausdorff(mask_a, mask_b):
    def boundary(mask):
        h, w = mask.shape
        pts = []
        for r in range(h):
            for c in range(w):
                if not mask[r, c]:
                    continue
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                        pts.append((r, c))
                        break
        return pts

    pa, pb = boundary(mask_a), boundary(mask_b)

    def directed(src, dst):
        return max(min(math.dist(s, d) for d in dst) for s in src)

    return max(directed(pa, pb), directed(pb, pa))


def test_hausdorff_matches_brute_force(rng):
    for _ in range(30):
        pred = np.zeros((12, 12), dtype=np.int16)
        gt = np.zeros((12, 12), dtype=np.int16)
        for mask in (pred, gt):
            n = int(rng.integers(1, 21))
            idx = rng.choice(144, size=n, replace=False)
            mask.reshape(-1)[idx] = 1
        expected = _brute_force_hausdorff(pred == 1, gt == 1)
        assert hausdorff(pred, gt, 1) == pytest.approx(expected, abs=1e-9)


def test_metrics_symmetry_and_translation(rng):
    a = np.zeros((16, 16), dtype=np.int16)
    b = np.zeros((16, 16), dtype=np.int16)
    a[2:6, 3:8] = 1
    b[4:9, 2:6] = 1
    assert dice(a, b, 1) == dice(b, a, 1)
    assert hausdorff(a, b, 1) == hausdorff(b, a, 1)
    ta = np.roll(np.roll(a, 3, axis=0), 2, axis=1)
    tb = np.roll(np.roll(b, 3, axis=0), 2, axis=1)
    assert dice(ta, tb, 1) == dice(a, b, 1)
    assert hausdorff(ta, tb, 1) == pytest.approx(hausdorff(a, b, 1))


def test_boundary_includes_image_border():
    mask = np.ones((3, 3), dtype=bool)
    pts = boundary_points(mask)
    assert len(pts) == 8  # everything except the center


def test_feature_variance_geometry():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    labels = np.array([0, 0, 1, 1])
    fv = feature_variance(emb, labels)
    assert fv.intra[0] == 0.0 and fv.intra[1] == 0.0
    assert fv.inter == pytest.approx(4.0)
    assert fv.ratio == 1e9  # capped


def test_feature_variance_permutation_invariant(rng):
    emb = rng.normal(size=(50, 8))
    labels = rng.integers(0, 3, size=50)
    base = feature_variance(emb, labels)
    perm = rng.permutation(50)
    shuffled = feature_variance(emb[perm], labels[perm])
    assert shuffled.mean_intra == pytest.approx(base.mean_intra, rel=1e-9)
    assert shuffled.inter == pytest.approx(base.inter, rel=1e-9)
    assert shuffled.ratio == pytest.approx(base.ratio, rel=1e-9)


def test_perfect_predictor_scores(tiny_dataset):
    records = tiny_dataset.records
    model = PlantedModel([planted_probs(r.full_label, 4) for r in records])

    class Whole(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.i = 0

        def forward(self, x):
            probs = model.prob_maps[self.i % len(records)].unsqueeze(0)
            self.i += 1
            return torch.zeros(1, 4, *x.shape[-2:]), probs

    report = evaluate_model(Whole(), tiny_dataset, tau=0.5)
    assert report.mean_dice == 1.0
    assert report.mean_hd == 0.0
    assert set(report.per_class) == {1, 2, 3, 4}


def test_report_schema_and_written_files(tmp_path, rng):
    preds = [rng.integers(0, 3, size=(8, 8)).astype(np.int16) for _ in range(3)]
    gts = [rng.integers(0, 3, size=(8, 8)).astype(np.int16) for _ in range(3)]
    report = score_predictions(preds, gts, num_classes=2)
    assert len(report.per_class) == 2
    report.write_csv(tmp_path / "r.csv")
    report.write_json(tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert lines[0] == "class,dice,hd,n_images"
    assert len(lines) == 1 + 2 + 1  # header + per-class + aggregate row
    # byte-stable for fixed inputs
    report.write_csv(tmp_path / "r2.csv")
    assert (tmp_path / "r.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
