import math

import numpy as np
import pytest
import torch

from ltuda.prototypes import (
    IGNORE,
    PrototypeBank,
    UninitializedBankError,
    build_labeled_bank_inputs,
    build_unlabeled_bank_inputs,
    copy_background,
    nearest_class_prototypes,
    proto_predict,
    update_bank,
)


def init_bank(protos, momentum=0.9):
    protos = torch.as_tensor(protos, dtype=torch.float32)
    bank = PrototypeBank(protos.shape[0] - 1, protos.shape[1], protos.shape[2], momentum)
    bank.protos = torch.nn.functional.normalize(protos, dim=2)
    bank.initialized[:] = True
    return bank


def test_predict_hand_case():
    # two classes, K=1, orthogonal prototypes; pixel equals class-1 prototype
    bank = init_bank([[[1.0, 0.0]], [[0.0, 1.0]]])
    pred = proto_predict(torch.tensor([[0.0, 1.0]]), bank)
    expected = math.exp(1) / (math.exp(1) + math.exp(0))
    assert float(pred[0, 1]) == pytest.approx(expected, rel=1e-6)
    assert float(pred[0, 0]) == pytest.approx(1 - expected, rel=1e-6)


def test_predict_equidistant_uniform():
    bank = init_bank([[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]])
    pred = proto_predict(torch.tensor([[0.0, 0.0, 1.0]]), bank)
    assert torch.allclose(pred, torch.full((1, 2), 0.5), atol=1e-6)


def test_predict_rows_sum_to_one(rng):
    torch.manual_seed(2)
    bank = init_bank(torch.randn(5, 3, 8))
    emb = torch.randn(40, 8)
    pred = proto_predict(emb, bank)
    assert torch.allclose(pred.sum(dim=1), torch.ones(40), atol=1e-6)


def test_predict_scale_invariance_exact():
    torch.manual_seed(3)
    bank = init_bank(torch.randn(3, 2, 8))
    emb = torch.randn(10, 8)
    base = proto_predict(emb, bank)
    assert torch.equal(proto_predict(emb * 4.0, bank), base)  # power of two: exact
    assert torch.allclose(proto_predict(emb * 3.7, bank), base, atol=1e-6)


def test_predict_spatial_layout():
    bank = init_bank(torch.randn(3, 2, 4))
    emb = torch.randn(4, 6, 5)
    pred = proto_predict(emb, bank)
    assert pred.shape == (3, 6, 5)
    flat = proto_predict(emb.permute(1, 2, 0).reshape(-1, 4), bank)
    assert torch.allclose(pred.permute(1, 2, 0).reshape(-1, 3), flat, atol=1e-6)


def test_predict_uninitialized_rejected():
    bank = PrototypeBank(2, 2, 4)
    with pytest.raises(UninitializedBankError):
        proto_predict(torch.randn(3, 4), bank)


def test_update_momentum_one_freezes(rng):
    bank = init_bank(torch.randn(3, 2, 4), momentum=1.0)
    before = bank.protos.clone()
    update_bank(bank, torch.randn(50, 4), torch.from_numpy(rng.integers(0, 3, 50)), rng)
    assert torch.equal(bank.protos, before)


def test_update_momentum_zero_k1_equals_class_mean(rng):
    bank = init_bank(torch.randn(2, 1, 4), momentum=0.0)
    emb = torch.randn(30, 4)
    labels = torch.ones(30, dtype=torch.long)
    update_bank(bank, emb, labels, rng)
    expected = torch.nn.functional.normalize(
        torch.nn.functional.normalize(emb, dim=1).mean(dim=0), dim=0
    )
    assert torch.allclose(bank.protos[1, 0], expected, atol=1e-6)


def test_update_two_planted_clusters(rng):
    # two tight clusters of one class; after convergence each K=2 slot sits in one
    torch.manual_seed(0)
    c1 = torch.tensor([1.0, 0.0, 0.0, 0.0])
    c2 = torch.tensor([0.0, 1.0, 0.0, 0.0])
    pts = torch.cat(
        [
            c1 + 0.05 * torch.randn(40, 4),
            c2 + 0.05 * torch.randn(40, 4),
        ]
    )
    labels = torch.zeros(80, dtype=torch.long)
    bank = PrototypeBank(0, 2, 4, momentum=0.5)
    for _ in range(30):
        update_bank(bank, pts, labels, rng)
    sims_c1 = bank.protos[0] @ torch.nn.functional.normalize(c1, dim=0)
    sims_c2 = bank.protos[0] @ torch.nn.functional.normalize(c2, dim=0)
    # one prototype per cluster (order free)
    hits = {int(sims_c1.argmax()), int(sims_c2.argmax())}
    assert hits == {0, 1}
    assert float(sims_c1.max()) > 0.99 and float(sims_c2.max()) > 0.99


def test_update_seeds_from_first_batch(rng):
    bank = PrototypeBank(1, 3, 4, momentum=0.9)
    emb = torch.randn(20, 4)
    labels = torch.cat([torch.zeros(10), torch.full((10,), IGNORE)]).long()
    update_bank(bank, emb, labels, rng)
    assert bool(bank.initialized[0].all())
    assert not bool(bank.initialized[1].any())  # class 1 never appeared
    norms = bank.protos[0].norm(dim=1)
    assert torch.allclose(norms, torch.ones(3), atol=1e-6)


def test_update_unit_norm_invariant(rng):
    bank = PrototypeBank(2, 2, 6, momentum=0.7)
    for _ in range(10):
        emb = torch.randn(60, 6)
        labels = torch.from_numpy(rng.integers(0, 3, 60))
        update_bank(bank, emb, labels, rng)
        seeded = bank.initialized
        norms = bank.protos[seeded].norm(dim=1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)


def test_update_ignores_sentinel_pixels(rng):
    bank = init_bank(torch.randn(2, 1, 4), momentum=0.5)
    before = bank.protos.clone()
    labels = torch.full((20,), IGNORE, dtype=torch.long)
    update_bank(bank, torch.randn(20, 4), labels, rng)
    assert torch.equal(bank.protos, before)


def test_nearest_class_prototypes_picks_same_class_slot():
    bank = init_bank([[[1.0, 0.0], [0.0, 1.0]], [[-1.0, 0.0], [0.0, -1.0]]])
    emb = torch.nn.functional.normalize(torch.tensor([[0.9, 0.1], [0.1, -0.9]]), dim=1)
    labels = torch.tensor([0, 1])
    k = nearest_class_prototypes(emb, labels, bank)
    assert k.tolist() == [0, 1]


def test_bank_input_builders():
    partial = np.array([[1, -1], [-1, 2]], dtype=np.int16)
    pseudo = np.array([[1, 0], [3, 2]], dtype=np.int16)
    labeled = build_labeled_bank_inputs(partial, pseudo)
    assert labeled.tolist() == [[1, IGNORE], [IGNORE, 2]]
    unlabeled = build_unlabeled_bank_inputs(partial, pseudo)
    assert unlabeled.tolist() == [[IGNORE, 0], [3, IGNORE]]


def test_copy_background_bitwise(rng):
    labeled = PrototypeBank(2, 2, 4)
    unlabeled = PrototypeBank(2, 2, 4)
    emb = torch.randn(30, 4)
    update_bank(unlabeled, emb, torch.zeros(30, dtype=torch.long), rng)
    copy_background(labeled, unlabeled)
    assert torch.equal(labeled.protos[0], unlabeled.protos[0])
    assert torch.equal(labeled.initialized[0], unlabeled.initialized[0])
    assert not bool(labeled.initialized[1:].any())


def test_state_dict_round_trip(rng):
    bank = init_bank(torch.randn(3, 2, 5), momentum=0.8)
    clone = PrototypeBank.from_state_dict(bank.state_dict())
    assert torch.equal(clone.protos, bank.protos)
    assert torch.equal(clone.initialized, bank.initialized)
    assert clone.momentum == bank.momentum
