import numpy as np
import pytest
import torch

from ltuda.config import parse_config
from ltuda.data import SampleDataset, generate_synthetic

FAST_OVERRIDES = [
    "model.depth=2",
    "model.base_width=4",
    "model.embedding_dim=16",
    "stage1_epochs=1",
    "stage2_epochs=1",
    "optim.lr=0.02",
    "ema.momentum=0.9",
    "prototypes.momentum=0.9",
    "prototypes.per_class=2",
]


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    generate_synthetic(4, 2, (64, 64), seed=11, out_dir=out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return SampleDataset.from_manifest(tiny_dataset_dir)


@pytest.fixture()
def fast_config():
    return parse_config(None, list(FAST_OVERRIDES))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


class PlantedModel(torch.nn.Module):
    """Fake backbone serving pre-computed per-class probabilities, batch in order."""

    def __init__(self, prob_maps, embedding_dim=8):
        super().__init__()
        self.prob_maps = [torch.as_tensor(p, dtype=torch.float32) for p in prob_maps]
        self.embedding_dim = embedding_dim
        self._param = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, _, h, w = x.shape
        assert b == len(self.prob_maps), "batch must match the planted table"
        emb = torch.zeros(b, self.embedding_dim, h, w) + self._param
        return emb, torch.stack(self.prob_maps)


def planted_probs(full_label, num_classes, hi=0.9, lo=0.05):
    """(C, H, W) probabilities that threshold back to ``full_label`` at tau=0.5."""
    c = np.arange(1, num_classes + 1).reshape(-1, 1, 1)
    return np.where(full_label[None] == c, hi, lo).astype(np.float32)
