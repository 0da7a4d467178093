import math

import numpy as np
import pytest
import torch

from garment_transfer.config import LOSS_TERMS, DEFAULT_LAMBDAS, TrainConfig
from garment_transfer.core import ValidationError
from garment_transfer.gdtm import occupancy
from garment_transfer.pipeline import view_batch
from garment_transfer.training import (CWMModel, DivergenceError, DivergenceMonitor, MetricsLog,
                                       NonFiniteLossError, StageOrderError, cwm_batch, full_objective,
                                       load_checkpoint, load_cwm, read_metrics, train_cwm, train_gdtm,
                                       warp_reference)


def tiny_config(**kw):
    base = dict(image_size=32, feature_channels=8, encoder_width=4, flow_width=4, refine_width=16,
                refine_blocks=3, disc_width=8, flow_pretrain_epochs=1, cwm_joint_epochs=2, steps_per_epoch=2,
                batch_size=2, gdtm_feature_channels=8, gdtm_width=8, mlp_hidden=(16, 16), geometry_steps=4,
                texture_steps=4, gdtm_points_per_view=64, gdtm_checkpoint_every=2)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# objective and bookkeeping
# ---------------------------------------------------------------------------

def test_unit_terms_sum_to_lambda_total():
    terms = {k: torch.tensor(1.0, dtype=torch.float64) for k in LOSS_TERMS}
    expected = sum(DEFAULT_LAMBDAS)
    assert float(full_objective(terms, DEFAULT_LAMBDAS)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(113.001)


def test_objective_zero_and_linearity():
    zero = {k: torch.tensor(0.0) for k in LOSS_TERMS}
    assert float(full_objective(zero, DEFAULT_LAMBDAS)) == 0.0
    terms = {"cycle": torch.tensor(0.3, dtype=torch.float64)}
    lam = list(DEFAULT_LAMBDAS)
    a = float(full_objective(terms, lam))
    lam[5] *= 2
    assert float(full_objective(terms, lam)) == 2 * a


def test_objective_rejects_nan_and_foreign_terms():
    with pytest.raises(NonFiniteLossError) as exc:
        full_objective({"flow": torch.tensor(1.0), "ctx": torch.tensor(float("nan"))}, DEFAULT_LAMBDAS)
    assert exc.value.term == "ctx"
    with pytest.raises(ValidationError):
        full_objective({"regS": torch.tensor(1.0)}, DEFAULT_LAMBDAS)


def test_divergence_monitor():
    m = DivergenceMonitor(factor=10.0, patience=3)
    m.update(1.0)
    m.update(50.0)
    m.update(1.0)          # resets the streak
    m.update(50.0)
    m.update(50.0)
    with pytest.raises(DivergenceError):
        m.update(50.0)


def test_metrics_log_monotone_and_truncation(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    log.write({"stage": "a", "step": 1, "x": 1.0})
    log.write({"stage": "a", "step": 2, "x": 2.0})
    log.write({"stage": "b", "step": 1, "x": 3.0})
    with pytest.raises(ValidationError):
        log.write({"stage": "a", "step": 1})
    with open(tmp_path / "m.jsonl", "a") as fh:
        fh.write('{"stage": "a", "st')
    assert [r["x"] for r in read_metrics(tmp_path / "m.jsonl")] == [1.0, 2.0, 3.0]
    assert read_metrics(tmp_path / "missing.jsonl") == []


# ---------------------------------------------------------------------------
# warping module
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cwm_run(tiny_dataset, tmp_path_factory):
    cfg = tiny_config(dtype="float64")
    out = tmp_path_factory.mktemp("cwm")
    return cfg, out, train_cwm(cfg, tiny_dataset, out)


def test_cwm_logs_every_term(cwm_run):
    _, out, summary = cwm_run
    records = read_metrics(out / "metrics.jsonl")
    joint = [r for r in records if r.get("stage") == "cwm_joint" and "total" in r]
    assert len(joint) == 4
    assert all(set(LOSS_TERMS) <= set(r) for r in joint)
    pre = [r for r in records if r.get("stage") == "flow_pretrain"]
    assert pre and all(set(r) & set(LOSS_TERMS) == {"flow", "regular"} for r in pre)
    assert len(summary["ssim"]) == 2
    for stage, n in (("flow_pretrain", 1), ("cwm_joint", 2)):
        for e in range(n + 1):
            assert (out / "checkpoints" / f"{stage}_e{e:03d}.pt").exists()


def test_resume_reproduces_losses(cwm_run, tiny_dataset, tmp_path):
    cfg, out, summary = cwm_run
    ckpt = out / "checkpoints" / "cwm_joint_e001.pt"
    resumed = train_cwm(cfg, tiny_dataset, tmp_path, resume=ckpt)
    full = summary["totals"]["cwm_joint"][cfg.steps_per_epoch:]
    again = resumed["totals"]["cwm_joint"]
    assert len(again) == len(full)
    assert np.allclose(again, full, rtol=0, atol=1e-5)


def test_resume_mid_pretrain(tiny_dataset, tmp_path):
    cfg = tiny_config(dtype="float64", flow_pretrain_epochs=2, cwm_joint_epochs=0)
    full = train_cwm(cfg, tiny_dataset, tmp_path / "a")
    train_cwm(cfg, tiny_dataset, tmp_path / "b", stop_after=("flow_pretrain", 1))
    resumed = train_cwm(cfg, tiny_dataset, tmp_path / "c",
                        resume=tmp_path / "b" / "checkpoints" / "flow_pretrain_e001.pt")
    a = full["totals"]["flow_pretrain"][cfg.steps_per_epoch:]
    assert np.allclose(resumed["totals"]["flow_pretrain"], a, rtol=0, atol=1e-5)


def test_resume_rejects_other_config(cwm_run, tiny_dataset, tmp_path):
    _, out, _ = cwm_run
    with pytest.raises(ValidationError):
        train_cwm(tiny_config(dtype="float64", seed=5), tiny_dataset, tmp_path,
                  resume=out / "checkpoints" / "cwm_joint_e001.pt")


def test_checkpoint_reload_is_bit_identical(cwm_run, tiny_dataset):
    cfg, out, _ = cwm_run
    model, cfg2 = load_cwm(out / "checkpoints" / "cwm_joint_latest.pt")
    assert cfg2.hash() == cfg.hash()
    blob = load_checkpoint(out / "checkpoints" / "cwm_joint_latest.pt")
    ref = CWMModel(cfg).to(torch.float64)
    ref.load_state_dict(blob["modules"]["cwm"])
    ref.eval()
    batch = cwm_batch(tiny_dataset, [(0, 1)], torch.float64)
    with torch.no_grad():
        a = warp_reference(model, batch, cfg)["w_r"]
        b = warp_reference(ref, batch, cfg)["w_r"]
    assert torch.equal(a, b)


def test_zero_epochs_emit_initial_checkpoint_only(tiny_dataset, tmp_path):
    cfg = tiny_config(flow_pretrain_epochs=0, cwm_joint_epochs=0)
    summary = train_cwm(cfg, tiny_dataset, tmp_path)
    files = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert files == ["cwm_joint_e000.pt", "cwm_joint_latest.pt", "flow_pretrain_e000.pt",
                     "flow_pretrain_latest.pt"]
    assert summary["totals"] == {"flow_pretrain": [], "cwm_joint": []}
    torch.manual_seed(cfg.seed)
    init = CWMModel(cfg).state_dict()
    saved = load_checkpoint(tmp_path / "checkpoints" / "cwm_joint_latest.pt")["modules"]["cwm"]
    assert all(torch.equal(init[k], saved[k]) for k in init)


def test_joint_lr_decays_linearly(tiny_dataset, tmp_path):
    cfg = tiny_config(cwm_joint_epochs=4, steps_per_epoch=1)
    train_cwm(cfg, tiny_dataset, tmp_path)
    lrs = []
    for e in range(1, 5):
        blob = load_checkpoint(tmp_path / "checkpoints" / f"cwm_joint_e{e:03d}.pt")
        lrs.append(blob["optimizers"]["gen"]["param_groups"][0]["lr"])
    assert np.allclose(lrs, [cfg.lr_cwm * (1 - k / 4) for k in range(4)])


@pytest.mark.slow
def test_reduced_objective_converges(small_dataset, tmp_path):
    # no contextual and adversarial terms: 200 steps must cut the moving-average total by 30%
    cfg = TrainConfig(image_size=64, lambdas=(1.0, 1.0, 0.001, 0.0, 0.0, 100.0), flow_pretrain_epochs=0,
                      cwm_joint_epochs=20, steps_per_epoch=10, batch_size=2, refine_width=32)
    totals = np.array(train_cwm(cfg, small_dataset, tmp_path)["totals"]["cwm_joint"])
    assert len(totals) == 200
    first, last = totals[:20].mean(), totals[-20:].mean()
    assert last <= 0.7 * first, (first, last)


# ---------------------------------------------------------------------------
# implicit fields
# ---------------------------------------------------------------------------

def test_texture_stage_needs_geometry(tiny_dataset, tmp_path):
    with pytest.raises(StageOrderError):
        train_gdtm(tiny_config(), tiny_dataset, tmp_path, stages=("gdtm_texture",))


def test_texture_stage_freezes_geometry(tiny_dataset, tmp_path):
    cfg = tiny_config()
    geo = train_gdtm(cfg, tiny_dataset, tmp_path, stages=("gdtm_geometry",))
    model = geo["model"]
    view = view_batch(tiny_dataset, 0)
    X = torch.rand(1, 200, 3) * 2 - 1
    with torch.no_grad():
        before = occupancy(model, view["image"], view["camera"], X)
    params = {k: v.clone() for k, v in model.state_dict().items() if k.startswith("geo_")}
    train_gdtm(cfg, tiny_dataset, tmp_path, model=model, stages=("gdtm_texture",))
    with torch.no_grad():
        after = occupancy(model, view["image"], view["camera"], X)
    assert torch.equal(before, after)
    assert all(torch.equal(params[k], model.state_dict()[k]) for k in params)
    assert bool(model.texture_trained) and bool(model.geometry_trained)
    ck = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert "gdtm_geometry_s000002.pt" in ck and "gdtm_texture_latest.pt" in ck


def test_gdtm_losses_finite_and_logged(tiny_dataset, tmp_path):
    summary = train_gdtm(tiny_config(), tiny_dataset, tmp_path)
    for stage, key in (("gdtm_geometry", "regS"), ("gdtm_texture", "regC")):
        vals = summary["losses"][stage]
        assert len(vals) == 4 and all(math.isfinite(v) for v in vals)
        recs = [r for r in read_metrics(tmp_path / "metrics.jsonl") if r.get("stage") == stage and key in r]
        assert len(recs) == 4
