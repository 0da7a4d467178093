import time

import pytest
import torch

from garment_transfer.core import ValidationError
from garment_transfer.gradcheck import CASES, numeric_gradient, relative_error, run_gradcheck


def test_all_losses_pass_within_budget():
    t0 = time.time()
    report = run_gradcheck()
    elapsed = time.time() - t0
    assert set(report) == {"flow", "regular", "perc", "ctx", "adv", "cycle", "regS", "regC"}
    for name, r in report.items():
        assert r["rel_err"] < 1e-3, (name, r)
    assert elapsed < 120


def test_numeric_gradient_of_known_function():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    (g,) = numeric_gradient(lambda t: (t ** 3).sum(), [x.clone()])
    assert torch.allclose(g, 3 * x ** 2, atol=1e-8)


def test_detects_a_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x          # true gradient is 2x

    x = torch.rand(4, dtype=torch.float64) + 0.5
    assert relative_error(Wrong.apply, [x]) > 0.1


def test_unknown_loss_name():
    with pytest.raises(ValidationError):
        run_gradcheck(["nope"])
    assert len(CASES) == 8
