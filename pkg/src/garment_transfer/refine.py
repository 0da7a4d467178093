"""Merge the two warps, refine the result with a modulated generator, and the image losses."""
from __future__ import annotations

import math
import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ValidationError, check_same_size, resize

OVERLAP_TOL = 1e-4
LOGIT_CLAMP = 15.0
GATE_INIT = -4.0


def combine_warps(body: torch.Tensor, clothing: torch.Tensor) -> torch.Tensor:
    """``w_r' = body + clothing``; where both are non-zero the clothing pixel wins."""
    check_same_size(body, clothing)
    overlap = (body.abs().amax(dim=1, keepdim=True) > OVERLAP_TOL) & \
              (clothing.abs().amax(dim=1, keepdim=True) > OVERLAP_TOL)
    if bool(overlap.any()):
        warnings.warn(f"combine_warps: {int(overlap.sum())} overlapping pixels, keeping clothing")
        body = body * (~overlap).to(body.dtype)
    return body + clothing


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class SPADE(nn.Module):
    """Parameter-free instance norm followed by per-pixel scale and bias from the condition."""

    def __init__(self, channels: int, cond_channels: int, hidden: int = 16):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 1)
        self.beta = nn.Conv2d(hidden, channels, 1)
        self.last_shapes = None

    def forward(self, x, cond):
        cond = resize(cond, x.shape[-2:])
        h = self.shared(cond)
        gamma, beta = self.gamma(h), self.beta(h)
        self.last_shapes = (tuple(x.shape), tuple(gamma.shape), tuple(beta.shape))
        return self.norm(x) * (1 + gamma) + beta


class SPADEResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cond_channels: int):
        super().__init__()
        mid = min(cin, cout)
        self.norm0 = SPADE(cin, cond_channels)
        self.conv0 = nn.Conv2d(cin, mid, 3, padding=1)
        self.norm1 = SPADE(mid, cond_channels)
        self.conv1 = nn.Conv2d(mid, cout, 3, padding=1)
        self.skip = None
        if cin != cout:
            self.norm_s = SPADE(cin, cond_channels)
            self.skip = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x, cond):
        s = x if self.skip is None else self.skip(self.norm_s(x, cond))
        h = self.conv0(F.leaky_relu(self.norm0(x, cond), 0.2))
        h = self.conv1(F.leaky_relu(self.norm1(h, cond), 0.2))
        return s + h

    def modulation_shapes(self):
        norms = [self.norm0, self.norm1] + ([self.norm_s] if self.skip is not None else [])
        return [n.last_shapes for n in norms]


def _channels_at(size: int, width: int) -> int:
    # narrow layers at high resolution keep the CPU cost flat across scales
    if size <= 16:
        return width
    if size <= 32:
        return max(16, width * 3 // 4)
    if size <= 64:
        return max(16, width // 2)
    return max(16, width // 4)


class RefinementGenerator(nn.Module):
    """Seven modulated residual blocks starting from an 8x8 copy of the condition.

    The first ``log2(H / start)`` blocks upsample by two; the remaining blocks
    run at the output resolution. The condition is ``(w_r', p_s)``.
    """

    def __init__(self, n_joints: int, image_size: int = 128, n_blocks: int = 7,
                 start: int = 8, width: int = 64):
        super().__init__()
        n_up = image_size // start
        if image_size % start or n_up & (n_up - 1):
            raise ValidationError(f"image size must be {start} * 2^k, got {image_size}")
        self.n_up = int(math.log2(n_up))
        if self.n_up > n_blocks:
            raise ValidationError(f"{n_blocks} blocks cannot upsample {start} -> {image_size}")
        self.image_size = image_size
        self.start = start
        cond = 3 + n_joints
        sizes, s = [], start
        for i in range(n_blocks):
            if i < self.n_up:
                s *= 2
            sizes.append(s)
        chans = [_channels_at(start, width)] + [_channels_at(s, width) for s in sizes]
        self.head = nn.Conv2d(cond, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList([SPADEResBlock(chans[i], chans[i + 1], cond) for i in range(n_blocks)])
        # RGB plus a blend gate; the gate starts nearly closed so training begins from w_r'
        self.tail = nn.Conv2d(chans[-1], 4, 3, padding=1)
        with torch.no_grad():
            self.tail.bias[3] = GATE_INIT

    def forward(self, w_r_prime, source_pose):
        return refine(self, w_r_prime, source_pose)

    def modulation_shapes(self):
        return [shape for b in self.blocks for shape in b.modulation_shapes()]


def refine(gen: RefinementGenerator, w_r_prime: torch.Tensor, source_pose: torch.Tensor) -> torch.Tensor:
    """Refined image in ``[0, 1]`` with the input's spatial size.

    The generator emits colours ``sigmoid(rgb)`` and a gate ``g``; the output
    is ``g * colours + (1 - g) * w_r'``, a per-pixel convex blend.
    """
    check_same_size(w_r_prime, source_pose)
    if tuple(w_r_prime.shape[-2:]) != (gen.image_size, gen.image_size):
        raise ValidationError(f"generator built for {gen.image_size} px, got {tuple(w_r_prime.shape[-2:])}")
    cond = torch.cat([w_r_prime, source_pose], dim=1)
    x = gen.head(resize(cond, (gen.start, gen.start)))
    for i, block in enumerate(gen.blocks):
        if i < gen.n_up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = block(x, cond)
    out = gen.tail(F.leaky_relu(x, 0.2))
    gate = torch.sigmoid(out[:, 3:])
    return gate * torch.sigmoid(out[:, :3]) + (1 - gate) * w_r_prime.clamp(0, 1)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    """Strided conv classifier over ``(p_s, I_r, image)``; one logit per patch.

    ``n_scales=2`` adds a second copy on a 2x average-pooled input.
    """

    def __init__(self, n_joints: int, width: int = 32, n_scales: int = 1, spectral_norm: bool = False):
        super().__init__()
        self.nets = nn.ModuleList([self._net(n_joints + 6, width, spectral_norm) for _ in range(n_scales)])

    @staticmethod
    def _net(in_ch, w, sn):
        wrap = nn.utils.spectral_norm if sn else (lambda m: m)
        return nn.Sequential(
            wrap(nn.Conv2d(in_ch, w, 4, 2, 1)), nn.LeakyReLU(0.2),
            wrap(nn.Conv2d(w, 2 * w, 4, 2, 1)), nn.InstanceNorm2d(2 * w), nn.LeakyReLU(0.2),
            wrap(nn.Conv2d(2 * w, 4 * w, 4, 2, 1)), nn.InstanceNorm2d(4 * w), nn.LeakyReLU(0.2),
            wrap(nn.Conv2d(4 * w, 1, 3, padding=1)),
        )

    def forward(self, condition, image) -> list[torch.Tensor]:
        p_s, I_r = condition
        check_same_size(p_s, I_r, image)
        x = torch.cat([p_s, I_r, image], dim=1)
        out = []
        for i, net in enumerate(self.nets):
            out.append(net(x if i == 0 else F.avg_pool2d(x, 2 ** i)))
        return out


def _bce_real(logits):
    # -log D(x) with D = sigmoid(logits)
    return F.softplus(-logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).mean()


def _bce_fake(logits):
    # -log(1 - D(x))
    return F.softplus(logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).mean()


def adversarial_losses(disc: PatchDiscriminator, condition, fake: torch.Tensor, real: torch.Tensor,
                       non_saturating: bool = False):
    """``(gen_loss, disc_loss)`` for a conditional patch GAN.

    ``disc_loss = -log D(real) - log(1 - D(fake))`` averaged over patch logits
    (the fake is detached). ``gen_loss = log(1 - D(fake))``, or
    ``-log D(fake)`` with ``non_saturating``. Logits are clamped to +-15.
    """
    check_same_size(fake, real)
    d_real = disc(condition, real)
    d_fake_detached = disc(condition, fake.detach())
    disc_loss = sum(_bce_real(r) + _bce_fake(f) for r, f in zip(d_real, d_fake_detached)) / len(d_real)
    d_fake = disc(condition, fake)
    if non_saturating:
        gen_loss = sum(_bce_real(f) for f in d_fake) / len(d_fake)
    else:
        gen_loss = -sum(_bce_fake(f) for f in d_fake) / len(d_fake)
    return gen_loss, disc_loss


# ---------------------------------------------------------------------------
# feature losses
# ---------------------------------------------------------------------------

def perceptual_loss(w_r: torch.Tensor, w_t: torch.Tensor, pyramid) -> torch.Tensor:
    """``sum_l ||phi_l(w_r) - phi_l(w_t)||_2`` per sample, averaged over the batch."""
    check_same_size(w_r, w_t)
    total = 0.0
    for a, b in zip(pyramid(w_r), pyramid(w_t)):
        total = total + torch.linalg.vector_norm((a - b).flatten(1), dim=1)
    return total.mean()


def contextual_similarity(x: torch.Tensor, y: torch.Tensor, bandwidth: float = 0.5,
                          eps: float = 1e-5) -> torch.Tensor:
    """Contextual similarity per sample between feature maps ``x`` and ``y``: ``(B,)``.

    Features are centred on the mean of ``y`` and compared by cosine;
    distances are normalised by each row's nearest distance, turned into
    affinities ``exp((1 - d~) / h)``, normalised over ``y`` positions, and the
    best match of every ``x`` position is averaged.
    """
    xf = x.flatten(2)
    yf = y.flatten(2)
    mu = yf.mean(dim=2, keepdim=True)
    xf = F.normalize(xf - mu, dim=1, eps=1e-8)
    yf = F.normalize(yf - mu, dim=1, eps=1e-8)
    d = 1.0 - torch.bmm(xf.transpose(1, 2), yf)                      # (B, Nx, Ny)
    d_rel = d / (d.min(dim=2, keepdim=True).values + eps)
    A = torch.softmax((1.0 - d_rel) / bandwidth, dim=2)
    return A.max(dim=2).values.mean(dim=1)


def contextual_loss(w_r: torch.Tensor, w_t: torch.Tensor, pyramid, levels=None,
                    bandwidth: float = 0.5, weights=None) -> torch.Tensor:
    """``sum_l w_l * -log(CX_l)`` averaged over the batch."""
    check_same_size(w_r, w_t)
    fa, fb = pyramid(w_r), pyramid(w_t)
    levels = range(len(fa)) if levels is None else levels
    total = 0.0
    for k, l in enumerate(levels):
        wl = 1.0 if weights is None else weights[k]
        cx = contextual_similarity(fa[l], fb[l], bandwidth)
        total = total + wl * -torch.log(cx.clamp_min(1e-12))
    return total.mean()
