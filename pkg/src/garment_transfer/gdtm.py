"""Garment compositing in image space and pixel-aligned implicit geometry/texture fields."""
from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .core import (FLIP_YZ, TRANSFER_LABELS, OccupancyGrid, TexturedMesh, ValidationError,
                   WeakPerspectiveCamera, bilinear_sample, check_same_size, label_mask)
from .marching_cubes import marching_cubes


class ContractError(RuntimeError):
    """An operation was called before the stage it depends on has been trained."""


# ---------------------------------------------------------------------------
# image layout transfer
# ---------------------------------------------------------------------------

def layout_masks(parsing_warped: torch.Tensor, parsing_source: torch.Tensor):
    """``(S_c, S_im)``: transferred region from the warped parsing and its complement.

    ``S_im`` is the source's non-transfer region. When the two do not
    partition the image, ``S_c`` keeps its pixels and ``S_im`` becomes
    ``1 - S_c`` (with a warning).
    """
    check_same_size(parsing_warped, parsing_source)
    S_c = label_mask(parsing_warped, TRANSFER_LABELS)
    S_im = 1.0 - label_mask(parsing_source, TRANSFER_LABELS)
    if not torch.equal(S_c + S_im, torch.ones_like(S_c)):
        n = int((S_c + S_im != 1).sum())
        warnings.warn(f"layout masks overlap or leave gaps at {n} pixels; using S_im = 1 - S_c")
        S_im = 1.0 - S_c
    return S_c, S_im


def composite(I_s: torch.Tensor, w_r: torch.Tensor, S_c: torch.Tensor, S_im: torch.Tensor) -> torch.Tensor:
    """``I_s * S_im + w_r * S_c`` for binary partition masks."""
    check_same_size(I_s, w_r, S_c, S_im)
    return I_s * S_im + w_r * S_c


def image_layout_transfer(I_s, w_r, parsing_warped, parsing_source) -> torch.Tensor:
    """Put the warped garment and arms on the source person: ``w_r^s``."""
    check_same_size(I_s, w_r, parsing_warped, parsing_source)
    S_c, S_im = layout_masks(parsing_warped, parsing_source)
    return composite(I_s, w_r, S_c, S_im)


# ---------------------------------------------------------------------------
# projection and pixel-aligned features
# ---------------------------------------------------------------------------

def project(camera: WeakPerspectiveCamera, X: torch.Tensor):
    """Weak-perspective projection: pixel positions ``(..., 2)`` and depths ``(...)``."""
    return camera.project_torch(X)


def sample_features(fmap: torch.Tensor, xy: torch.Tensor, image_size) -> torch.Tensor:
    """Bilinear lookup of ``fmap`` at image pixel positions ``xy (B, N, 2)`` -> ``(B, N, C)``.

    ``fmap`` may be at a lower resolution than the image; positions are
    rescaled so pixel centres line up.
    """
    h_img, w_img = image_size
    h, w = fmap.shape[-2:]
    scale = xy.new_tensor([w / w_img, h / h_img])
    coords = (xy + 0.5) * scale - 0.5
    out = bilinear_sample(fmap, coords.unsqueeze(1))          # (B, C, 1, N)
    return out[:, :, 0].transpose(1, 2)


class ImageEncoder(nn.Module):
    """Hourglass conv encoder with group norm; features at half the input resolution."""

    def __init__(self, in_ch: int = 3, channels: int = 32, width: int = 32):
        super().__init__()
        w = width

        def block(cin, cout, k=3, stride=1):
            return [nn.Conv2d(cin, cout, k, stride, (k - 1) // 2 if stride == 1 else 1),
                    nn.GroupNorm(8, cout), nn.LeakyReLU(0.2)]

        self.d1 = nn.Sequential(*block(in_ch, w), *block(w, w, 4, 2))          # 1/2
        self.d2 = nn.Sequential(*block(w, 2 * w, 4, 2))                        # 1/4
        self.d3 = nn.Sequential(*block(2 * w, 2 * w, 4, 2))                    # 1/8
        self.d4 = nn.Sequential(*block(2 * w, 2 * w, 4, 2), *block(2 * w, 2 * w))  # 1/16
        self.u3 = nn.Sequential(*block(4 * w, 2 * w))
        self.u2 = nn.Sequential(*block(4 * w, 2 * w))
        self.u1 = nn.Sequential(*block(3 * w, w), nn.Conv2d(w, channels, 3, padding=1))
        self.out_channels = channels

    def forward(self, x):
        e1 = self.d1(x)
        e2 = self.d2(e1)
        e3 = self.d3(e2)
        e4 = self.d4(e3)
        up = lambda a, b: F.interpolate(a, size=b.shape[-2:], mode="bilinear", align_corners=False)  # noqa: E731
        d3 = self.u3(torch.cat([up(e4, e3), e3], 1))
        d2 = self.u2(torch.cat([up(d3, e2), e2], 1))
        return self.u1(torch.cat([up(d2, e1), e1], 1))


class ImplicitMLP(nn.Module):
    """Point-wise MLP with the input re-injected halfway; sigmoid output."""

    def __init__(self, in_dim: int, out_dim: int = 1, hidden=(128, 96, 64)):
        super().__init__()
        hidden = list(hidden)
        self.mid = len(hidden) // 2
        layers, d = [], in_dim
        for i, h in enumerate(hidden):
            layers.append(nn.Linear(d + (in_dim if i == self.mid and i > 0 else 0), h))
            d = h
        self.layers = nn.ModuleList(layers)
        self.out = nn.Linear(d, out_dim)

    def forward(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            if i == self.mid and i > 0:
                h = torch.cat([h, x], dim=-1)
            h = F.leaky_relu(layer(h), 0.2)
        return torch.sigmoid(self.out(h))


class ImplicitModel(nn.Module):
    """Geometry branch ``(g, f)`` and texture branch ``(g_c, g_im, f_C)``."""

    def __init__(self, channels: int = 32, width: int = 32, hidden=(128, 96, 64)):
        super().__init__()
        self.geo_encoder = ImageEncoder(3, channels, width)
        self.geo_mlp = ImplicitMLP(channels + 1, 1, hidden)
        self.tex_encoder_c = ImageEncoder(3, channels, width)
        self.tex_encoder_im = ImageEncoder(3, channels, width)
        self.tex_mlp = ImplicitMLP(2 * channels + 1, 3, hidden)
        self.register_buffer("geometry_trained", torch.zeros((), dtype=torch.bool))
        self.register_buffer("texture_trained", torch.zeros((), dtype=torch.bool))

    def geometry_parameters(self):
        return list(self.geo_encoder.parameters()) + list(self.geo_mlp.parameters())

    def texture_parameters(self):
        return (list(self.tex_encoder_c.parameters()) + list(self.tex_encoder_im.parameters())
                + list(self.tex_mlp.parameters()))


def _camera_list(camera, batch):
    cams = camera if isinstance(camera, (list, tuple)) else [camera] * batch
    if len(cams) != batch:
        raise ValidationError("one camera per batch element expected")
    return cams


def _project_batch(cameras, X):
    xy, z = zip(*(project(c, X[b]) for b, c in enumerate(cameras)))
    return torch.stack(xy), torch.stack(z)


def geometry_features(model: ImplicitModel, image: torch.Tensor) -> torch.Tensor:
    """``F_g``: output of the geometry encoder (the embedding reused by the texture branch)."""
    return model.geo_encoder(image)


def occupancy(model: ImplicitModel, image: torch.Tensor, camera, X: torch.Tensor,
              features: torch.Tensor | None = None) -> torch.Tensor:
    """``s = f(F(phi(X)), z(X))`` in ``[0, 1]`` for points ``X (B, N, 3)`` -> ``(B, N)``."""
    if not torch.isfinite(X).all():
        raise ValidationError("query points must be finite")
    cams = _camera_list(camera, X.shape[0])
    fmap = geometry_features(model, image) if features is None else features
    xy, z = _project_batch(cams, X)
    feat = sample_features(fmap, xy, image.shape[-2:])
    return model.geo_mlp(torch.cat([feat, z.unsqueeze(-1)], dim=-1)).squeeze(-1)


def texture_feature_map(model: ImplicitModel, image_c: torch.Tensor, image_im: torch.Tensor,
                        S_c: torch.Tensor, S_im: torch.Tensor) -> torch.Tensor:
    """``F_c = S_c * g_c(image_c * S_c) + S_im * g_im(image_im * S_im)`` at full resolution."""
    check_same_size(image_c, image_im, S_c, S_im)
    size = image_c.shape[-2:]
    up = lambda f: F.interpolate(f, size=size, mode="bilinear", align_corners=False)  # noqa: E731
    f_c = up(model.tex_encoder_c(image_c * S_c))
    f_im = up(model.tex_encoder_im(image_im * S_im))
    return S_c * f_c + S_im * f_im


def texture(model: ImplicitModel, w_r: torch.Tensor, S_c: torch.Tensor, S_im: torch.Tensor,
            F_g: torch.Tensor, camera, X: torch.Tensor, image_im: torch.Tensor | None = None,
            feature_map: torch.Tensor | None = None) -> torch.Tensor:
    """RGB in ``[0, 1]^3`` for points ``X (B, N, 3)`` -> ``(B, N, 3)``.

    ``w_r`` feeds the garment branch and ``image_im`` (default ``w_r``) the
    non-garment branch. ``F_g`` is the frozen geometry embedding of the same
    view.
    """
    if not bool(model.geometry_trained):
        raise ContractError("texture queried before the geometry stage was trained")
    cams = _camera_list(camera, X.shape[0])
    image_im = w_r if image_im is None else image_im
    fmap = texture_feature_map(model, w_r, image_im, S_c, S_im) if feature_map is None else feature_map
    xy, z = _project_batch(cams, X)
    size = w_r.shape[-2:]
    fc = sample_features(fmap, xy, size)
    fg = sample_features(F_g.detach(), xy, size)
    return model.tex_mlp(torch.cat([fc, z.unsqueeze(-1), fg], dim=-1))


def regression_losses(pred_s, target_s, pred_rgb, target_rgb):
    """``(L_regS, L_regC)``: mean squared errors of occupancy and colour."""
    if pred_s is not None and pred_s.shape != target_s.shape:
        raise ValidationError("occupancy prediction and target differ in shape")
    if pred_rgb is not None and pred_rgb.shape != target_rgb.shape:
        raise ValidationError("colour prediction and target differ in shape")
    ls = F.mse_loss(pred_s, target_s) if pred_s is not None else None
    # squared error summed over the three channels, averaged over points
    lc = (pred_rgb - target_rgb).pow(2).sum(-1).mean() if pred_rgb is not None else None
    return ls, lc


# ---------------------------------------------------------------------------
# frames, sampling wrappers and reconstruction
# ---------------------------------------------------------------------------

def view_to_world(camera: WeakPerspectiveCamera) -> np.ndarray:
    """Rotation taking view-frame points (y up, subject facing +z) to world points."""
    return camera.rotation.T @ FLIP_YZ


def world_to_view(camera: WeakPerspectiveCamera) -> np.ndarray:
    return view_to_world(camera).T


def sample_occupancy_points(mesh, n_uniform, n_surface, sigma, rng=None, **kw):
    rng = np.random.default_rng(0) if rng is None else rng
    return geometry.sample_occupancy_points(mesh, n_uniform, n_surface, sigma, rng, **kw)


def sample_color_points(mesh, n, sigma_normal, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    return geometry.sample_color_points(mesh, n, sigma_normal, rng)


point_in_mesh = geometry.point_in_mesh


@torch.no_grad()
def occupancy_grid(model: ImplicitModel, image: torch.Tensor, camera: WeakPerspectiveCamera,
                   resolution: int = 64, chunk: int = 32768) -> OccupancyGrid:
    """Occupancy on the ``[-1, 1]^3`` view-frame grid for a single image ``(1, 3, H, W)``."""
    if image.shape[0] != 1:
        raise ValidationError("reconstruct one image at a time")
    dtype = image.dtype
    V = OccupancyGrid.points(resolution)
    X = torch.as_tensor(V @ view_to_world(camera).T, dtype=dtype)
    fmap = geometry_features(model, image)
    vals = [occupancy(model, image, camera, X[a:a + chunk].unsqueeze(0), features=fmap)[0]
            for a in range(0, len(X), chunk)]
    values = torch.cat(vals).reshape((resolution,) * 3).cpu().numpy()
    return OccupancyGrid(values, (-1, -1, -1), (1, 1, 1))


@torch.no_grad()
def reconstruct(model: ImplicitModel, image: torch.Tensor, camera: WeakPerspectiveCamera,
                S_c: torch.Tensor | None = None, S_im: torch.Tensor | None = None,
                resolution: int = 64, texture_image: torch.Tensor | None = None,
                chunk: int = 32768) -> TexturedMesh:
    """Occupancy grid -> marching cubes at 0.5 -> per-vertex texture queries.

    The mesh lives in the view frame of ``camera``. Without masks the whole
    image counts as non-garment region.
    """
    if not bool(model.geometry_trained) or not bool(model.texture_trained):
        raise ContractError("reconstruction needs trained geometry and texture branches")
    grid = occupancy_grid(model, image, camera, resolution, chunk)
    mesh = marching_cubes(grid, 0.5)
    if mesh.is_empty():
        return mesh
    if S_c is None:
        S_c = torch.zeros_like(image[:, :1])
    if S_im is None:
        S_im = 1.0 - S_c
    tex_c = image if texture_image is None else texture_image
    F_g = geometry_features(model, image)
    fmap = texture_feature_map(model, tex_c, image, S_c, S_im)
    X = torch.as_tensor(mesh.vertices @ view_to_world(camera).T, dtype=image.dtype)
    cols = [texture(model, tex_c, S_c, S_im, F_g, camera, X[a:a + chunk].unsqueeze(0),
                    image_im=image, feature_map=fmap)[0] for a in range(0, len(X), chunk)]
    mesh.vertex_colors = torch.cat(cols).cpu().numpy().astype(np.float64)
    return mesh
