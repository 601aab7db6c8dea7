import numpy as np
import pytest
import torch

from sketchmod.backbone import ToyBackbone, ToyBackboneConfig


@pytest.fixture(scope="session")
def toy_backbone() -> ToyBackbone:
    return ToyBackbone(ToyBackboneConfig())


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    from sketchmod.toy_data import build_toy_dataset

    root = tmp_path_factory.mktemp("toy_data")
    build_toy_dataset(root, n_pairs=16, n_test=4)
    return root


def random_latent(shape, seed, dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=dtype)


def random_image(size, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(size, size))
