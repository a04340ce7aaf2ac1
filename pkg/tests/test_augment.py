import numpy as np
import pytest

from ltuda.augment import (
    MixSpec,
    WeakAugSpec,
    cutmix,
    mix_grids,
    mixspec_from_lam,
    sample_mixspec,
    sample_weak_spec,
    strong_views,
    weak_augment,
)
from ltuda.data import PartialLabelMap, SampleRecord


def _record(rng, h=32, w=32, labeled_class=2):
    image = rng.uniform(-1, 1, size=(h, w)).astype(np.float32)
    full = np.zeros((h, w), dtype=np.int16)
    full[h // 4 : h // 2, w // 4 : w // 2] = labeled_class
    partial = np.where(full == labeled_class, labeled_class, -1).astype(np.int16)
    plm = PartialLabelMap(partial, labeled_class, known_negative=full != labeled_class)
    return SampleRecord(image=image, partial_label=plm, subset_id=0, full_label=full)


def test_weak_identity(rng):
    rec = _record(rng)
    out = weak_augment(rec, WeakAugSpec(angle=0.0, scale=1.0))
    assert np.array_equal(out.image, rec.image)
    assert np.array_equal(out.partial_label.classes, rec.partial_label.classes)


def test_weak_label_closure(rng):
    rec = _record(rng)
    before = set(np.unique(rec.partial_label.classes).tolist())
    for _ in range(20):
        spec = sample_weak_spec(rng, max_angle=30.0, scale_range=(0.7, 1.3))
        out = weak_augment(rec, spec)
        after = set(np.unique(out.partial_label.classes).tolist())
        assert after <= before | {-1}


def test_weak_rotate90_matches_index_rotation(rng):
    rec = _record(rng, h=33, w=33)
    out = weak_augment(rec, WeakAugSpec(angle=90.0, scale=1.0))
    assert np.array_equal(out.partial_label.classes, np.rot90(rec.partial_label.classes, 1))
    assert np.array_equal(out.full_label, np.rot90(rec.full_label, 1))
    np.testing.assert_allclose(out.image, np.rot90(rec.image, 1), atol=1e-5)


def test_weak_out_of_canvas_fill(rng):
    rec = _record(rng)
    out = weak_augment(rec, WeakAugSpec(angle=0.0, scale=0.5))
    # zoomed out: corners come from outside the canvas
    assert out.partial_label.classes[0, 0] == -1
    assert not out.partial_label.known_negative[0, 0]
    assert out.image[0, 0] == pytest.approx(float(np.median(rec.image)))


def test_mixspec_lam_limits():
    spec1 = mixspec_from_lam(64, 64, lam=1.0, r_x=10, r_y=20)
    assert spec1.box[2] == 0 and spec1.box[3] == 0
    assert not spec1.mask.any()
    spec0 = mixspec_from_lam(64, 64, lam=0.0, r_x=0, r_y=0)
    assert spec0.mask.all()


def test_mixspec_box_size_formula(rng):
    for _ in range(200):
        h, w = int(rng.integers(8, 80)), int(rng.integers(8, 80))
        spec = sample_mixspec(h, w, rng)
        r_x, r_y, r_w, r_h = spec.box
        side = np.sqrt(1.0 - spec.lam)
        assert r_w == round(w * side) and r_h == round(h * side)
        assert 0 <= r_x < w and 0 <= r_y < h
        # mask is exactly the clipped box interior
        expected = np.zeros((h, w), dtype=bool)
        expected[r_y : min(r_y + r_h, h), r_x : min(r_x + r_w, w)] = True
        assert np.array_equal(spec.mask, expected)


def test_mixspec_mean_unclipped_fraction(rng):
    # E[r_w*r_h / (W*H)] = E[1 - lam] = 0.5
    h = w = 64
    fracs = []
    for _ in range(10_000):
        spec = sample_mixspec(h, w, rng)
        fracs.append(spec.box[2] * spec.box[3] / (w * h))
    assert abs(float(np.mean(fracs)) - 0.5) < 0.02


def test_cutmix_limits(rng):
    a, b = _record(rng), _record(rng, labeled_class=3)
    pa = rng.integers(0, 5, size=a.image.shape).astype(np.int16)
    pb = rng.integers(0, 5, size=b.image.shape).astype(np.int16)
    off = mixspec_from_lam(32, 32, lam=1.0, r_x=0, r_y=0)
    view = cutmix(a.image, pa, a.partial_label.classes, b.image, pb, b.partial_label.classes, off)
    assert np.array_equal(view.image, a.image) and np.array_equal(view.pseudo, pa)
    on = mixspec_from_lam(32, 32, lam=0.0, r_x=0, r_y=0)
    view = cutmix(a.image, pa, a.partial_label.classes, b.image, pb, b.partial_label.classes, on)
    assert np.array_equal(view.image, b.image) and np.array_equal(view.pseudo, pb)


def test_cutmix_every_pixel_from_one_parent(rng):
    a, b = _record(rng), _record(rng, labeled_class=3)
    pa = np.zeros(a.image.shape, dtype=np.int16)
    pb = np.ones(b.image.shape, dtype=np.int16)
    spec = sample_mixspec(32, 32, rng)
    view = cutmix(a.image, pa, a.partial_label.classes, b.image, pb, b.partial_label.classes, spec)
    from_a = view.image == a.image
    from_b = view.image == b.image
    assert np.all(from_a | from_b)
    # pasted patch sits at the identical coordinates in the partner
    assert np.array_equal(view.image[spec.mask], b.image[spec.mask])
    assert np.array_equal(view.pseudo[spec.mask], pb[spec.mask])
    assert np.array_equal(view.image[~spec.mask], a.image[~spec.mask])


def test_mix_grids_shape_mismatch():
    with pytest.raises(ValueError):
        mix_grids(np.zeros((4, 4)), np.zeros((5, 4)), np.zeros((4, 4), dtype=bool))


def test_strong_views_counts_and_determinism(rng):
    records = [_record(rng, labeled_class=c) for c in (1, 2, 3, 4)]
    pseudos = [np.full(r.image.shape, i, dtype=np.int16) for i, r in enumerate(records)]
    single = strong_views(records, pseudos, 1, np.random.default_rng(3))
    assert len(single) == 1 and len(single[0]) == 4
    two = strong_views(records, pseudos, 2, np.random.default_rng(3))
    boxes0 = [v.spec.box for v in two[0]]
    boxes1 = [v.spec.box for v in two[1]]
    assert boxes0 != boxes1  # views differ
    again = strong_views(records, pseudos, 2, np.random.default_rng(3))
    assert [v.spec.box for v in again[0]] == boxes0
    assert [v.spec.box for v in again[1]] == boxes1


def test_strong_views_never_self_pairs(rng):
    records = [_record(rng, labeled_class=c) for c in (1, 2, 3)]
    pseudos = [np.zeros(r.image.shape, dtype=np.int16) for r in records]
    for _ in range(25):
        for view in strong_views(records, pseudos, 1, rng):
            for i, s in enumerate(view):
                assert s.spec.partner_index != i


def test_strong_views_rejects_small_batch(rng):
    rec = _record(rng)
    with pytest.raises(ValueError):
        strong_views([rec], [np.zeros(rec.image.shape, dtype=np.int16)], 1, rng)
