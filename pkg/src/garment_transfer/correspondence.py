"""Dense correspondence between a reference image and a target pose.

``M[b, u, v]`` is the cosine similarity between the pose feature at output
position ``u`` and the reference-image feature at position ``v`` (both
centred by their spatial mean). Warping takes a softmax over ``v`` for every
``u``; the cycle warp reuses the same matrix with the softmax taken over
``u`` instead.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (BACKGROUND, CLOTHING_LABELS, ValidationError, argmax_one_hot, check_same_size,
                   label_mask, resize)

EPS = 1e-8


def _encoder(in_ch: int, out_ch: int, width: int) -> nn.Sequential:
    """Four conv blocks, two of them strided: output stride 4."""
    return nn.Sequential(
        nn.Conv2d(in_ch, width, 3, padding=1),
        nn.InstanceNorm2d(width, affine=True),
        nn.LeakyReLU(0.2),
        nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
        nn.InstanceNorm2d(2 * width, affine=True),
        nn.LeakyReLU(0.2),
        nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1),
        nn.InstanceNorm2d(2 * width, affine=True),
        nn.LeakyReLU(0.2),
        nn.Conv2d(2 * width, out_ch, 3, padding=1),
    )


class DualEncoder(nn.Module):
    """Independent extractors for the reference image and the target keypoint field."""

    def __init__(self, n_joints: int, channels: int = 64, width: int = 16):
        super().__init__()
        self.ref = _encoder(3, channels, width)
        self.pose = _encoder(n_joints, channels, width)

    def forward(self, reference, source_pose):
        return embed(self, reference, source_pose)


def embed(encoder: DualEncoder, reference: torch.Tensor, source_pose: torch.Tensor):
    """Return ``(f_r, f_s)`` at a quarter of the input resolution."""
    if reference.shape[-2:] != source_pose.shape[-2:]:
        raise ValidationError(
            f"reference {tuple(reference.shape[-2:])} and pose {tuple(source_pose.shape[-2:])} differ in size")
    return encoder.ref(reference), encoder.pose(source_pose)


def correspondence_matrix(f_r: torch.Tensor, f_s: torch.Tensor, centralize: bool = True) -> torch.Tensor:
    """Cosine matrix ``(B, HW_s, HW_r)`` between source-pose and reference features."""
    if f_r.shape[1] != f_s.shape[1]:
        raise ValidationError("feature maps must have the same channel count")
    fr = f_r.flatten(2)
    fs = f_s.flatten(2)
    if centralize:
        fr = fr - fr.mean(dim=2, keepdim=True)
        fs = fs - fs.mean(dim=2, keepdim=True)
    num = torch.bmm(fs.transpose(1, 2), fr)
    den = fs.norm(dim=1).unsqueeze(2) * fr.norm(dim=1).unsqueeze(1) + EPS
    return num / den


def _warp_low(weights: torch.Tensor, x: torch.Tensor, size) -> torch.Tensor:
    b, c = x.shape[:2]
    flat = x.flatten(2)                                   # (B, C, HW_in)
    out = torch.bmm(flat, weights.transpose(1, 2))        # (B, C, HW_out)
    return out.reshape(b, c, *size)


def _feature_size(M: torch.Tensor, x: torch.Tensor, size):
    if size is None:
        # assume the raster is an integer multiple of the feature grid
        h, w = x.shape[-2:]
        factor = round((h * w / M.shape[-1]) ** 0.5)
        if factor < 1 or h % factor or w % factor:
            raise ValidationError("cannot infer the feature size; pass feature_size")
        size = (h // factor, w // factor)
    if size[0] * size[1] != M.shape[-1]:
        raise ValidationError(f"feature size {size} does not match matrix width {M.shape[-1]}")
    return tuple(size)


def dense_warp(M: torch.Tensor, reference: torch.Tensor, alpha: float = 100.0,
               feature_size=None, parsing: bool = False) -> torch.Tensor:
    """Attention warp: ``out(u) = sum_v softmax_v(alpha * M[u, v]) * reference(v)``.

    ``reference`` is area-downsampled to ``feature_size`` when needed and the
    result is bilinearly upsampled back. Parsing maps are re-normalised and
    re-one-hotted after warping.
    """
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    size = _feature_size(M, reference, feature_size)
    full = tuple(reference.shape[-2:])
    weights = torch.softmax(alpha * M, dim=2)
    out = _warp_low(weights, resize(reference, size), size)
    out = resize(out, full)
    if parsing:
        out = argmax_one_hot(out / out.sum(dim=1, keepdim=True).clamp_min(EPS))
    return out


def cycle_warp(M: torch.Tensor, warped: torch.Tensor, alpha: float = 100.0,
               feature_size=None) -> torch.Tensor:
    """Warp back towards the reference layout: softmax over the output axis of ``M``.

    The result stays at feature resolution.
    """
    size = _feature_size(M, warped, feature_size)
    weights = torch.softmax(alpha * M, dim=1).transpose(1, 2)   # (B, HW_r, HW_s)
    return _warp_low(weights, resize(warped, size), size)


def extract_body_region(warped: torch.Tensor, warped_parsing: torch.Tensor) -> torch.Tensor:
    """Foreground pixels that are not clothing: ``warped * (fg - clothing_mask)``."""
    check_same_size(warped, warped_parsing)
    hard = argmax_one_hot(warped_parsing)
    mask = 1 - label_mask(hard, (BACKGROUND,) + tuple(CLOTHING_LABELS))
    return warped * mask


def cycle_loss(w_r: torch.Tensor, M: torch.Tensor, I_r: torch.Tensor, alpha: float = 100.0,
               feature_size=None) -> torch.Tensor:
    """Mean L1 between ``w_r`` warped back through ``M`` and the reference image.

    Both sides are compared at the correspondence resolution.
    """
    size = _feature_size(M, I_r, feature_size)
    back = cycle_warp(M, w_r, alpha, size)
    return F.l1_loss(back, resize(I_r, size))
