import numpy as np
import pytest
import torch

from garment_transfer.synthdata import SyntheticDataset, build_dataset


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three subjects, four views each, 32 px: enough to exercise every training path."""
    root = tmp_path_factory.mktemp("tiny_ds")
    build_dataset(root, n_train_subjects=2, n_test_subjects=1, views_per_subject=4, image_size=32,
                  n_uniform=400, n_surface=400, n_color=400, n_heldout=400)
    return SyntheticDataset(root)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Two subjects, eight views, 64 px."""
    root = tmp_path_factory.mktemp("small_ds")
    build_dataset(root, n_train_subjects=2, n_test_subjects=0, views_per_subject=8, image_size=64,
                  n_uniform=2000, n_surface=2000, n_color=2000, n_heldout=2000)
    return SyntheticDataset(root)
