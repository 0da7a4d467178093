import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from garment_transfer.core import ValidationError
from garment_transfer.metrics import gaussian_window, occupancy_accuracy, ssim


def _reference(a, b):
    return structural_similarity(a, b, channel_axis=-1, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, data_range=1.0)


def _pair(rng, size=32):
    a = rng.random((size, size, 3))
    # half the pairs are correlated so the scores span the range
    b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.6), a.shape), 0, 1) if rng.random() < 0.5 \
        else rng.random((size, size, 3))
    return a, b


def test_matches_skimage_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = _pair(rng, int(rng.integers(16, 48)))
        assert abs(ssim(a, b) - _reference(a, b)) < 1e-4


def test_tensor_and_array_inputs_agree():
    rng = np.random.default_rng(1)
    a, b = _pair(rng)
    ta = torch.from_numpy(a).permute(2, 0, 1).float()
    tb = torch.from_numpy(b).permute(2, 0, 1).float()
    assert ssim(ta, tb) == pytest.approx(ssim(a, b), abs=1e-6)
    assert ssim(ta[None], tb[None]) == pytest.approx(ssim(ta, tb), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_identity_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = _pair(rng, 20)
    assert abs(ssim(a, a) - 1.0) <= 1e-6
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_input_validation():
    with pytest.raises(ValidationError):
        ssim(np.zeros((16, 16, 3)), np.zeros((17, 16, 3)))
    with pytest.raises(ValidationError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ValidationError):
        ssim(np.zeros((16, 16)), np.zeros((16, 16)))


def test_gaussian_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-12)
    assert torch.equal(w, w.T)


def test_occupancy_accuracy():
    assert occupancy_accuracy(np.array([0.2, 0.7, 0.9]), np.array([0, 1, 0])) == pytest.approx(2 / 3)
