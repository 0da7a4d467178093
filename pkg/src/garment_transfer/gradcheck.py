"""Central finite-difference checks of every training loss on miniature inputs.

All checks run in float64. The error reported for a loss is
``max|g_auto - g_fd| / max|g_fd|`` over every checked input.
"""
from __future__ import annotations

import time

import torch

from .core import ValidationError
from .correspondence import cycle_loss
from .flow import FeaturePyramid, affine_regularization, flow_warp, sampling_correctness_loss
from .gdtm import regression_losses
from .refine import PatchDiscriminator, adversarial_losses, contextual_loss, perceptual_loss

TOLERANCE = 1e-3
DTYPE = torch.float64


def numeric_gradient(fn, inputs: list[torch.Tensor], h: float = 1e-6) -> list[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(fn(*inputs))
                flat[i] = old - h
                down = float(fn(*inputs))
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def analytic_gradient(fn, inputs: list[torch.Tensor]) -> list[torch.Tensor]:
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    return list(torch.autograd.grad(out, leaves))


def relative_error(fn, inputs: list[torch.Tensor], h: float = 1e-6) -> float:
    auto = analytic_gradient(fn, inputs)
    num = numeric_gradient(fn, [x.detach().clone() for x in inputs], h)
    diff = max(float((a - n).abs().max()) for a, n in zip(auto, num))
    scale = max(float(n.abs().max()) for n in num)
    return diff / max(scale, 1e-12)


# ---------------------------------------------------------------------------
# miniature instances, one per loss
# ---------------------------------------------------------------------------

def _tiny_pyramid():
    return FeaturePyramid(seed=7, widths=(4, 6, 8)).to(DTYPE)


def _case_flow(g):
    pyr = _tiny_pyramid()
    ref = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    tgt = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    flow = (torch.rand(1, 2, 16, 16, generator=g, dtype=DTYPE) - 0.5) * 4
    with torch.no_grad():
        v_t, v_s = pyr(tgt)[1:], pyr(ref)[1:]

    def fn(fl):
        return sampling_correctness_loss(pyr(flow_warp(fl, ref))[1:], v_t, v_s)
    return fn, [flow]


def _case_regular(g):
    flow = torch.randn(1, 2, 9, 9, generator=g, dtype=DTYPE)
    return (lambda fl: affine_regularization(fl, 5)), [flow]


def _case_perc(g):
    pyr = _tiny_pyramid()
    tgt = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    img = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    return (lambda x: perceptual_loss(x, tgt, pyr)), [img]


def _case_ctx(g):
    pyr = _tiny_pyramid()
    tgt = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    img = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    return (lambda x: contextual_loss(x, tgt, pyr, levels=(1, 2))), [img]


def _case_adv(g):
    torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=g)))
    disc = PatchDiscriminator(2, width=4).to(DTYPE)
    p_s = torch.rand(1, 2, 16, 16, generator=g, dtype=DTYPE)
    I_r = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    fake = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)
    real = torch.rand(1, 3, 16, 16, generator=g, dtype=DTYPE)

    def fn(f, r):
        # generator term through the fake, discriminator term through the real image
        gen, _ = adversarial_losses(disc, (p_s, I_r), f, real)
        _, d = adversarial_losses(disc, (p_s, I_r), fake, r)
        return gen + d
    return fn, [fake, real]


def _case_cycle(g):
    M = torch.rand(1, 16, 16, generator=g, dtype=DTYPE) * 2 - 1
    w_r = torch.rand(1, 3, 4, 4, generator=g, dtype=DTYPE)
    I_r = torch.rand(1, 3, 4, 4, generator=g, dtype=DTYPE)
    return (lambda w, m: cycle_loss(w, m, I_r, alpha=100.0, feature_size=(4, 4))), [w_r, M]


def _case_regS(g):
    target = (torch.rand(2, 32, generator=g, dtype=DTYPE) > 0.5).to(DTYPE)
    pred = torch.rand(2, 32, generator=g, dtype=DTYPE)
    return (lambda p: regression_losses(p, target, None, None)[0]), [pred]


def _case_regC(g):
    target = torch.rand(2, 32, 3, generator=g, dtype=DTYPE)
    pred = torch.rand(2, 32, 3, generator=g, dtype=DTYPE)
    return (lambda p: regression_losses(None, None, p, target)[1]), [pred]


CASES = {
    "flow": _case_flow,
    "regular": _case_regular,
    "perc": _case_perc,
    "ctx": _case_ctx,
    "adv": _case_adv,
    "cycle": _case_cycle,
    "regS": _case_regS,
    "regC": _case_regC,
}


def run_gradcheck(names=None, seed: int = 0, tolerance: float = TOLERANCE) -> dict:
    """Check the selected losses (default all); returns ``{name: {rel_err, seconds, passed}}``."""
    names = list(CASES) if names in (None, "all") else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ValidationError(f"unknown losses {unknown}; choose from {list(CASES)}")
    report = {}
    for name in names:
        g = torch.Generator().manual_seed(seed)
        t0 = time.time()
        fn, inputs = CASES[name](g)
        err = relative_error(fn, inputs)
        report[name] = {"rel_err": err, "seconds": time.time() - t0, "passed": err < tolerance}
    return report
