"""Flow estimation between poses, flow warping and the two unsupervised flow losses."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (CLOTHING_LABELS, ValidationError, argmax_one_hot, bilinear_sample,
                   check_same_size, identity_grid, label_mask)

EPS = 1e-8


class FlowEstimator(nn.Module):
    """U-Net over ``(I_s, p_r, p_s)`` emitting flows at 1/8, 1/4, 1/2 and full scale.

    Each finer flow is the upsampled coarser flow (rescaled to the finer pixel
    grid) plus a residual. Residual heads start at zero, so an untrained
    estimator predicts the identity warp.
    """

    def __init__(self, n_joints: int, width: int = 16):
        super().__init__()
        in_ch = 3 + 2 * n_joints
        w = width
        act = lambda: nn.LeakyReLU(0.2)  # noqa: E731
        self.enc0 = nn.Sequential(nn.Conv2d(in_ch, w, 3, padding=1), act())
        self.enc1 = nn.Sequential(nn.Conv2d(w, 2 * w, 4, 2, 1), act())
        self.enc2 = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 4, 2, 1), act())
        self.enc3 = nn.Sequential(nn.Conv2d(4 * w, 4 * w, 4, 2, 1), act(),
                                  nn.Conv2d(4 * w, 4 * w, 3, padding=1), act())
        self.dec2 = nn.Sequential(nn.Conv2d(8 * w, 2 * w, 3, padding=1), act())
        self.dec1 = nn.Sequential(nn.Conv2d(4 * w, w, 3, padding=1), act())
        self.dec0 = nn.Sequential(nn.Conv2d(2 * w, w, 3, padding=1), act())
        self.heads = nn.ModuleList([nn.Conv2d(c, 2, 3, padding=1) for c in (4 * w, 2 * w, w, w)])
        for h in self.heads:
            nn.init.zeros_(h.weight)
            nn.init.zeros_(h.bias)

    def forward(self, I_s, p_r, p_s):
        return estimate_flow(self, I_s, p_r, p_s)


def _up(x, like):
    return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)


def estimate_flow(est: FlowEstimator, I_s, p_r, p_s) -> list[torch.Tensor]:
    """Coarse-to-fine flows ``[1/8, 1/4, 1/2, 1]`` in pixel units of their own scale."""
    check_same_size(I_s, p_r, p_s)
    if I_s.shape[-1] % 8 or I_s.shape[-2] % 8:
        raise ValidationError("flow estimation needs sizes divisible by 8")
    e0 = est.enc0(torch.cat([I_s, p_r, p_s], dim=1))
    e1 = est.enc1(e0)
    e2 = est.enc2(e1)
    e3 = est.enc3(e2)
    flows = [est.heads[0](e3)]
    d = e3
    for dec, skip, head in ((est.dec2, e2, est.heads[1]), (est.dec1, e1, est.heads[2]),
                            (est.dec0, e0, est.heads[3])):
        d = dec(torch.cat([_up(d, skip), skip], dim=1))
        flows.append(2.0 * _up(flows[-1], skip) + head(d))
    return flows


def flow_warp(flow: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """``out(u) = reference(u + flow(u))`` by bilinear sampling (clamped borders)."""
    check_same_size(flow, reference)
    b, _, h, w = flow.shape
    grid = identity_grid(h, w, b, dtype=flow.dtype, device=flow.device) + flow.permute(0, 2, 3, 1)
    return bilinear_sample(reference, grid)


def extract_clothing_region(warped: torch.Tensor, warped_parsing: torch.Tensor) -> torch.Tensor:
    """Clothing only: ``warped * clothing_mask``."""
    check_same_size(warped, warped_parsing)
    return warped * label_mask(argmax_one_hot(warped_parsing), CLOTHING_LABELS)


# ---------------------------------------------------------------------------
# fixed feature pyramid
# ---------------------------------------------------------------------------

def _channel_normalize(f: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # written out: F.instance_norm's backward disagreed with finite differences here
    mean = f.mean(dim=(2, 3), keepdim=True)
    var = f.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (f - mean) / torch.sqrt(var + eps)


class FeaturePyramid(nn.Module):
    """Frozen, randomly initialised three-level conv extractor (strides 2, 4, 8).

    Each level is instance-normalised per image and channel: raw ReLU responses
    of a random net are nearly collinear everywhere, which flattens cosine
    based losses. Any module returning a list of feature maps with decreasing sizes can be
    used in its place (e.g. pretrained classifier features).
    """

    def __init__(self, seed: int = 1234, widths=(16, 32, 64), normalize: bool = True):
        super().__init__()
        self.normalize = normalize
        g = torch.Generator().manual_seed(seed)
        c1, c2, c3 = widths
        self.level1 = nn.Sequential(nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(),
                                    nn.Conv2d(c1, c1, 3, stride=2, padding=1), nn.ReLU())
        self.level2 = nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU())
        self.level3 = nn.Sequential(nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU())
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                    m.bias.copy_(torch.rand(m.bias.shape, generator=g) * 0.1)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        x = x * 2.0 - 1.0
        f1 = self.level1(x)
        f2 = self.level2(f1)
        f3 = self.level3(f2)
        if self.normalize:
            return [_channel_normalize(f) for f in (f1, f2, f3)]
        return [f1, f2, f3]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _relative_normalizer(v_t: torch.Tensor, v_s: torch.Tensor, chunk: int = 1024) -> torch.Tensor:
    """Max cosine between each target location and every source location: ``(B, HW)``."""
    t = F.normalize(v_t.flatten(2), dim=1, eps=EPS)
    s = F.normalize(v_s.flatten(2), dim=1, eps=EPS)
    out = []
    for a in range(0, t.shape[2], chunk):
        sim = torch.bmm(t[:, :, a:a + chunk].transpose(1, 2), s)
        out.append(sim.max(dim=2).values)
    return torch.cat(out, dim=1)


def sampling_correctness_loss(v_r, v_t, v_s=None, mu: str = "relative",
                              reduction: str = "mean") -> torch.Tensor:
    """``sum_l exp(-cos(v_r(l), v_t(l)) / mu_l)`` over feature levels and locations.

    ``v_r``: features of the flow-warped reference, ``v_t``: features of the
    ground truth, ``v_s``: features of the unwarped reference (defaults to
    ``v_r``). ``mu_l`` is the best similarity any source location reaches for
    target location ``l``; ``mu="one"`` disables it. ``reduction="mean"``
    averages over locations within a level (levels are summed);
    ``"sum"`` adds every location.
    """
    if v_s is None:
        v_s = v_r
    total = 0.0
    for r, t, s in zip(v_r, v_t, v_s):
        cos = F.cosine_similarity(r, t, dim=1, eps=EPS).flatten(1)     # (B, HW)
        if mu == "relative":
            with torch.no_grad():
                norm = _relative_normalizer(t, s)
                norm = torch.where(norm > 1e-3, norm, torch.ones_like(norm))
        elif mu == "one":
            norm = torch.ones_like(cos)
        else:
            raise ValidationError(f"unknown mu mode {mu!r}")
        term = torch.exp(-cos / norm)
        total = total + (term.mean(dim=1) if reduction == "mean" else term.sum(dim=1))
    return total.mean()


def affine_projector(n: int, dtype=torch.float64, ridge: float = 1e-6) -> torch.Tensor:
    """``I - S (S^T S)^-1 S^T`` for homogeneous local patch coordinates ``S``."""
    ys, xs = torch.meshgrid(torch.arange(n, dtype=dtype), torch.arange(n, dtype=dtype), indexing="ij")
    S = torch.stack([xs.flatten(), ys.flatten(), torch.ones(n * n, dtype=dtype)], dim=1)
    normal = S.T @ S
    if torch.linalg.cond(normal) > 1e12:
        normal = normal + ridge * torch.eye(3, dtype=dtype)
    P = S @ torch.linalg.solve(normal, S.T)
    return torch.eye(n * n, dtype=dtype) - P


def affine_regularization(flow: torch.Tensor, patch_n: int = 5) -> torch.Tensor:
    """Mean over all ``n x n`` patches of the least-squares affine-fit residual.

    Targets are ``T = S + flow`` for source pixel coordinates ``S``; since
    ``S`` lies in the span of the affine model, the residual only depends on
    the flow values in the patch.
    """
    if patch_n < 3 or patch_n % 2 == 0:
        raise ValidationError("patch_n must be odd and at least 3")
    b, c, h, w = flow.shape
    if h < patch_n or w < patch_n:
        raise ValidationError("flow field smaller than one patch")
    R = affine_projector(patch_n).to(flow.dtype)
    # unfold orders the patch as (row, col), matching the projector's ordering
    patches = F.unfold(flow, patch_n).reshape(b, c, patch_n * patch_n, -1)
    resid = torch.einsum("ij,bcjl->bcil", R, patches)
    return resid.pow(2).sum(dim=(1, 2)).mean()
