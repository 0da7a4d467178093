import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from garment_transfer.core import (CLOTHING_LABELS, FLIP_YZ, KEYPOINT_SIGMA, N_LABELS, OccupancyGrid,
                                   ValidationError, WeakPerspectiveCamera, argmax_one_hot,
                                   bilinear_sample, identity_grid, keypoint_field, label_mask,
                                   one_hot, resize, rotation_y)
from garment_transfer.geometry import icosphere


def test_one_hot_roundtrip_and_mask():
    labels = torch.randint(0, N_LABELS, (2, 5, 6))
    oh = one_hot(labels)
    assert oh.shape == (2, N_LABELS, 5, 6)
    assert torch.equal(oh.sum(1), torch.ones(2, 5, 6))
    assert torch.equal(argmax_one_hot(oh), oh)
    mask = label_mask(oh, CLOTHING_LABELS)[:, 0]
    expected = sum((labels == l) for l in CLOTHING_LABELS).float()
    assert torch.equal(mask, expected)


def test_one_hot_rejects_out_of_range():
    with pytest.raises(ValidationError):
        one_hot(torch.tensor([[0, N_LABELS]]))


def test_keypoint_field_values():
    field = keypoint_field(np.array([[2.0, 3.0]]), 8, 10)
    assert field.shape == (1, 8, 10)
    assert field[0, 3, 2] == pytest.approx(1.0)
    # pixel (x=5, y=7): distance 5 from the joint
    assert field[0, 7, 5] == pytest.approx(math.exp(-5.0 / KEYPOINT_SIGMA), rel=1e-6)


def test_identity_grid_is_pixel_centres():
    g = identity_grid(3, 4, batch=2)
    assert g.shape == (2, 3, 4, 2)
    assert g[0, 2, 3].tolist() == [3.0, 2.0]


def test_bilinear_sample_matches_grid_sample():
    # independent implementation: torch's grid_sample with corner alignment and border padding
    src = torch.rand(2, 3, 7, 9, dtype=torch.float64)
    coords = torch.rand(2, 5, 4, 2, dtype=torch.float64) * torch.tensor([12.0, 10.0]) - 2.0
    ours = bilinear_sample(src, coords)
    norm = torch.stack([coords[..., 0] / 8 * 2 - 1, coords[..., 1] / 6 * 2 - 1], -1)
    ref = F.grid_sample(src, norm, mode="bilinear", padding_mode="border", align_corners=True)
    assert torch.allclose(ours, ref, atol=1e-12)


def test_bilinear_sample_integer_coords_exact():
    src = torch.rand(1, 2, 6, 6)
    assert torch.equal(bilinear_sample(src, identity_grid(6, 6)), src)


def test_bilinear_sample_rejects_nan():
    with pytest.raises(ValidationError):
        bilinear_sample(torch.rand(1, 1, 4, 4), torch.full((1, 2, 2, 2), float("nan")))


def test_resize_area_and_bilinear():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    assert torch.allclose(resize(x, (2, 2)), F.avg_pool2d(x, 2))
    assert resize(x, (8, 8)).shape[-2:] == (8, 8)


def test_camera_identity_projection():
    cam = WeakPerspectiveCamera(scale=1.0)
    X = np.array([[0.3, -0.2, 0.7]])
    xy, z = cam.project(X)
    assert np.allclose(xy, X[:, :2]) and np.allclose(z, X[:, 2])


def test_camera_half_turn_negates_lateral_and_depth():
    X = np.array([[0.3, -0.2, 0.7]])
    a, za = WeakPerspectiveCamera(1.0, rotation=rotation_y(0)).project(X)
    b, zb = WeakPerspectiveCamera(1.0, rotation=rotation_y(180)).project(X)
    assert np.allclose(b[:, 0], -a[:, 0]) and np.allclose(b[:, 1], a[:, 1]) and np.allclose(zb, -za)


def test_camera_validation_and_roundtrip():
    with pytest.raises(ValidationError):
        WeakPerspectiveCamera(scale=0.0)
    with pytest.raises(ValidationError):
        WeakPerspectiveCamera(scale=1.0, rotation=np.diag([1.0, 2.0, 1.0]))
    cam = WeakPerspectiveCamera.orbit(30.0, 128)
    back = WeakPerspectiveCamera.from_dict(cam.to_dict())
    assert np.allclose(back.rotation, cam.rotation) and back.scale == cam.scale
    assert np.allclose(cam.rotation, FLIP_YZ @ rotation_y(30.0))


def test_camera_torch_matches_numpy():
    cam = WeakPerspectiveCamera.orbit(75.0, 64)
    X = np.random.default_rng(1).normal(size=(10, 3))
    xy, z = cam.project(X)
    txy, tz = cam.project_torch(torch.tensor(X))
    assert np.allclose(txy.numpy(), xy) and np.allclose(tz.numpy(), z)


def test_mesh_properties_on_icosphere():
    m = icosphere(4, 0.5)
    assert m.is_watertight()
    assert m.signed_volume() == pytest.approx(4 / 3 * math.pi * 0.125, rel=0.01)
    n = m.vertex_normals()
    assert np.allclose((n * m.vertices / 0.5).sum(1), 1.0, atol=1e-2)


def test_occupancy_grid_points_order():
    pts = OccupancyGrid.points(3)
    assert pts.shape == (27, 3)
    assert pts[1].tolist() == [-1.0, -1.0, 0.0]
    assert pts[-1].tolist() == [1.0, 1.0, 1.0]


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_bilinear_sample_constant_flow_shift(dx, dy):
    # sampling a linear ramp at shifted coordinates shifts the ramp (inside the border)
    h = w = 12
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    ramp = (2 * xs + 3 * ys)[None, None]
    coords = identity_grid(h, w, dtype=torch.float64) + torch.tensor([dx, dy], dtype=torch.float64)
    out = bilinear_sample(ramp, coords)[0, 0]
    inner = (slice(3, h - 3), slice(3, w - 3))
    assert torch.allclose(out[inner], (2 * (xs + dx) + 3 * (ys + dy))[inner], atol=1e-9)
