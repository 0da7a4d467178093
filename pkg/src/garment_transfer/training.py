"""Staged training: warping module (flow pretrain, joint) and implicit fields (geometry, texture)."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import LOSS_TERMS, TrainConfig
from .core import TRANSFER_LABELS, ValidationError, label_mask, resize
from .correspondence import (DualEncoder, correspondence_matrix, cycle_loss, dense_warp, embed,
                             extract_body_region)
from .flow import (FeaturePyramid, FlowEstimator, affine_regularization, estimate_flow,
                   extract_clothing_region, flow_warp, sampling_correctness_loss)
from .gdtm import ImplicitModel, geometry_features, occupancy, regression_losses, texture
from .refine import (PatchDiscriminator, RefinementGenerator, adversarial_losses, combine_warps,
                     contextual_loss, perceptual_loss, refine)
from .synthdata import N_JOINTS, SyntheticDataset, enumerate_pairs

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term


class DivergenceError(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingStage:
    name: str
    params: tuple          # attribute names of the trained sub-modules
    terms: tuple           # active loss terms
    requires: str | None = None


STAGES = {
    "flow_pretrain": TrainingStage("flow_pretrain", ("flow",), ("flow", "regular")),
    "cwm_joint": TrainingStage("cwm_joint", ("encoder", "flow", "generator"), LOSS_TERMS,
                               requires="flow_pretrain"),
    "gdtm_geometry": TrainingStage("gdtm_geometry", ("geo_encoder", "geo_mlp"), ("regS",)),
    "gdtm_texture": TrainingStage("gdtm_texture", ("tex_encoder_c", "tex_encoder_im", "tex_mlp"),
                                  ("regC",), requires="gdtm_geometry"),
}


# ---------------------------------------------------------------------------
# objective and bookkeeping
# ---------------------------------------------------------------------------

def full_objective(terms: dict, lambdas) -> torch.Tensor:
    """Weighted sum of the six warping-module terms; missing terms count as zero.

    Occupancy and colour regression terms are trained separately and are
    rejected here.
    """
    if isinstance(lambdas, dict):
        weights = lambdas
    else:
        weights = dict(zip(LOSS_TERMS, lambdas))
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise ValidationError(f"terms outside the warping objective: {sorted(unknown)}")
    total = 0.0
    for name in LOSS_TERMS:
        if name not in terms:
            continue
        value = terms[name]
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        total = total + weights[name] * value
    return total if torch.is_tensor(total) else torch.tensor(float(total))


class DivergenceMonitor:
    """Raise when the loss stays above ``factor`` times its first value for ``patience`` steps."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.count = 0

    def update(self, loss: float) -> None:
        if self.initial is None:
            self.initial = abs(loss) + 1e-12
            return
        self.count = self.count + 1 if loss > self.factor * self.initial else 0
        if self.count >= self.patience:
            raise DivergenceError(
                f"loss {loss:.4g} above {self.factor}x initial ({self.initial:.4g}) for {self.count} steps")


class MetricsLog:
    """Append-only JSON-lines file; steps must not go backwards within a stage."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last = {}

    def write(self, record: dict) -> None:
        stage, step = record.get("stage"), record.get("step")
        if step is not None:
            if step < self._last.get(stage, -1):
                raise ValidationError(f"metrics step went backwards in {stage}")
            self._last[stage] = step
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()


def read_metrics(path) -> list[dict]:
    """Parse a metrics file, skipping a truncated trailing line."""
    out = []
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text().splitlines():
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            continue
    return out


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}


def _restore_rng(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state["numpy"]
    torch.set_rng_state(state["torch"])


def save_checkpoint(path, *, stage: str, epoch: int, step: int, completed: bool, modules: dict,
                    optimizers: dict, config: TrainConfig, rng: np.random.Generator) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "stage": stage, "epoch": epoch, "step": step, "completed": completed,
        "modules": {k: m.state_dict() for k, m in modules.items()},
        "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
        "config": config.to_dict(), "config_hash": config.hash(), "rng": _rng_state(rng),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return torch.load(path, map_location="cpu", weights_only=False)


def latest_checkpoint(ckpt_dir, stage: str) -> Path | None:
    p = Path(ckpt_dir) / f"{stage}_latest.pt"
    return p if p.exists() else None


def _assert_disjoint(trained, frozen) -> None:
    ids = {id(p) for p in trained}
    if any(id(p) in ids for p in frozen):
        raise StageOrderError("trained and frozen parameter sets overlap")


# ---------------------------------------------------------------------------
# warping module
# ---------------------------------------------------------------------------

class CWMModel(torch.nn.Module):
    """Correspondence encoders, flow estimator, refinement generator and discriminator."""

    def __init__(self, config: TrainConfig, n_joints: int = N_JOINTS):
        super().__init__()
        self.encoder = DualEncoder(n_joints, config.feature_channels, config.encoder_width)
        self.flow = FlowEstimator(n_joints, config.flow_width)
        self.generator = RefinementGenerator(n_joints, config.image_size, config.refine_blocks,
                                             config.refine_start, config.refine_width)
        self.disc = PatchDiscriminator(n_joints, config.disc_width, config.disc_scales, config.spectral_norm)
        self.pyramid = FeaturePyramid()

    def stage_parameters(self, stage: str) -> list:
        return [p for name in STAGES[stage].params for p in getattr(self, name).parameters()]


def cwm_batch(ds: SyntheticDataset, pairs, dtype=torch.float32) -> dict:
    """Stack (reference, source) view pairs into model inputs."""
    refs = [ds.load_view(r) for r, _ in pairs]
    srcs = [ds.load_view(s) for _, s in pairs]
    t = lambda items, key: torch.as_tensor(np.stack([it[key] for it in items]), dtype=dtype)  # noqa: E731
    return {"I_r": t(refs, "image"), "parsing_r": t(refs, "parsing"), "p_r": t(refs, "keypoints"),
            "I_s": t(srcs, "image"), "parsing_s": t(srcs, "parsing"), "p_s": t(srcs, "keypoints"),
            "cameras_s": [it["camera"] for it in srcs]}


def warp_reference(model: CWMModel, batch: dict, config: TrainConfig, with_refine: bool = True) -> dict:
    """Both warps of ``I_r`` into pose ``p_s``, their combination and the refined image."""
    I_r, p_r, p_s, I_s = batch["I_r"], batch["p_r"], batch["p_s"], batch["I_s"]
    f_r, f_s = embed(model.encoder, I_r, p_s)
    M = correspondence_matrix(f_r, f_s)
    size = tuple(f_r.shape[-2:])
    dense = dense_warp(M, I_r, config.alpha, size)
    flows = estimate_flow(model.flow, I_s, p_r, p_s)
    flowed = flow_warp(flows[-1], I_r)
    # one parsing map (from the flow warp) splits clothing and body, so the two parts never overlap
    parsing_w = flow_warp(flows[-1], batch["parsing_r"])
    parsing_w = torch.nn.functional.one_hot(parsing_w.argmax(1), parsing_w.shape[1]).permute(0, 3, 1, 2).to(I_r.dtype)
    body = extract_body_region(dense, parsing_w)
    clothing = extract_clothing_region(flowed, parsing_w)
    combined = combine_warps(body, clothing)
    out = {"M": M, "feature_size": size, "dense": dense, "flows": flows, "flowed": flowed,
           "parsing_warped": parsing_w, "body": body, "clothing": clothing, "combined": combined}
    if with_refine:
        out["w_r"] = refine(model.generator, combined, p_s)
    return out


def flow_terms(model: CWMModel, batch: dict, flows, config: TrainConfig) -> dict:
    """Sampling-correctness and affine terms at the finest ``flow_loss_scales`` scales."""
    lf, lr = 0.0, 0.0
    levels = config.flow_loss_levels
    for k in range(1, config.flow_loss_scales + 1):
        flow = flows[-k]
        size = tuple(flow.shape[-2:])
        I_r = resize(batch["I_r"], size)
        warped = flow_warp(flow, I_r)
        pick = lambda feats: [feats[l] for l in levels]  # noqa: E731
        with torch.no_grad():
            v_t = pick(model.pyramid(resize(batch["I_s"], size)))
            v_s = pick(model.pyramid(I_r))
        lf = lf + sampling_correctness_loss(pick(model.pyramid(warped)), v_t, v_s, mu=config.mu)
        lr = lr + affine_regularization(flow, config.patch_n)
    return {"flow": lf, "regular": lr}


def cwm_terms(model: CWMModel, batch: dict, out: dict, config: TrainConfig):
    """All six terms plus the discriminator loss."""
    terms = flow_terms(model, batch, out["flows"], config)
    w_r, I_s = out["w_r"], batch["I_s"]
    terms["perc"] = perceptual_loss(w_r, I_s, model.pyramid)
    terms["ctx"] = contextual_loss(w_r, I_s, model.pyramid, config.ctx_levels, config.ctx_bandwidth)
    gen, disc = adversarial_losses(model.disc, (batch["p_s"], batch["I_r"]), w_r, I_s,
                                   config.non_saturating)
    terms["adv"] = gen
    terms["cycle"] = cycle_loss(w_r, out["M"], batch["I_r"], config.alpha, out["feature_size"])
    return terms, disc


def _scalars(terms: dict) -> dict:
    return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}


def validation_views(ds: SyntheticDataset, n: int = 2) -> list[int]:
    test = ds.subject_ids("test") or ds.subject_ids("train")
    out = []
    for sid in test:
        out += ds.views_of(sid)[:1]
    return out[:n]


@torch.no_grad()
def self_pose_ssim(model: CWMModel, ds: SyntheticDataset, views, config: TrainConfig) -> float:
    from .metrics import ssim
    batch = cwm_batch(ds, [(v, v) for v in views], config.torch_dtype)
    w_r = warp_reference(model, batch, config)["w_r"]
    return float(np.mean([ssim(w_r[i], batch["I_s"][i]) for i in range(len(views))]))


def _make_optimizers(model: CWMModel, config: TrainConfig, stage: str) -> dict:
    opts = {"gen": torch.optim.Adam(model.stage_parameters(stage), lr=config.lr_cwm, betas=(0.5, 0.999))}
    if stage == "cwm_joint":
        opts["disc"] = torch.optim.Adam(model.disc.parameters(), lr=config.lr_disc, betas=(0.5, 0.999))
    return opts


def _set_epoch_lr(opts: dict, config: TrainConfig, stage: str, epoch: int, n_epochs: int) -> None:
    # derived from the epoch index alone so a resumed run sees the same schedule
    scale = 1.0
    if stage == "cwm_joint" and config.joint_lr_decay:
        scale = 1.0 - (epoch - 1) / n_epochs
    base = {"gen": config.lr_cwm, "disc": config.lr_disc}
    for k, o in opts.items():
        for g in o.param_groups:
            g["lr"] = base[k] * scale


def _cwm_epochs(config: TrainConfig, stage: str) -> int:
    return config.flow_pretrain_epochs if stage == "flow_pretrain" else config.cwm_joint_epochs


def train_cwm(config: TrainConfig, dataset, out_dir, resume: str | Path | None = None,
              stop_after: tuple | None = None) -> dict:
    """Run ``flow_pretrain`` then ``cwm_joint``; checkpoint after every epoch.

    ``resume`` continues from a checkpoint file. ``stop_after=(stage, epoch)``
    ends the run early (used to test resumption). Returns a summary with the
    per-step totals of each stage and the final checkpoint path.
    """
    ds = dataset if isinstance(dataset, SyntheticDataset) else SyntheticDataset(dataset)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    metrics = MetricsLog(out_dir / "metrics.jsonl")
    pairs = enumerate_pairs(ds.manifest, "train", config.pairs_per_subject, config.seed)
    if not pairs:
        raise ValidationError("dataset has no training pairs")

    torch.manual_seed(config.seed)
    model = CWMModel(config).to(config.torch_dtype)
    rng = np.random.default_rng(config.seed)
    start_stage, start_epoch, step = "flow_pretrain", 0, 0
    resume_blob = None
    if resume is not None:
        resume_blob = load_checkpoint(resume)
        if resume_blob["config_hash"] != config.hash():
            raise ValidationError("checkpoint was written with a different configuration")
        model.load_state_dict(resume_blob["modules"]["cwm"])
        start_stage, start_epoch, step = resume_blob["stage"], resume_blob["epoch"], resume_blob["step"]
        if resume_blob["completed"] and start_stage == "flow_pretrain":
            start_stage, start_epoch = "cwm_joint", 0
        _restore_rng(rng, resume_blob["rng"])

    summary = {"totals": {}, "ssim": [], "checkpoint": None}
    val_views = validation_views(ds)
    stages = ["flow_pretrain", "cwm_joint"]
    done = set(stages[:stages.index(start_stage)])
    for stage in stages[stages.index(start_stage):]:
        spec = STAGES[stage]
        if spec.requires and spec.requires not in done:
            raise StageOrderError(f"{stage} needs a completed {spec.requires} checkpoint")
        trained = model.stage_parameters(stage)
        frozen = [p for n in ("encoder", "flow", "generator") if n not in spec.params
                  for p in getattr(model, n).parameters()]
        _assert_disjoint(trained, frozen)
        opts = _make_optimizers(model, config, stage)
        first = 0
        if resume_blob is not None and resume_blob["stage"] == stage and not resume_blob["completed"]:
            for k, o in opts.items():
                o.load_state_dict(resume_blob["optimizers"][k])
            first = start_epoch
        n_epochs = _cwm_epochs(config, stage)
        monitor = DivergenceMonitor(config.divergence_factor, config.divergence_patience)
        totals = summary["totals"].setdefault(stage, [])

        def checkpoint(epoch, completed):
            p = save_checkpoint(ckpt_dir / f"{stage}_e{epoch:03d}.pt", stage=stage, epoch=epoch, step=step,
                                completed=completed, modules={"cwm": model}, optimizers=opts,
                                config=config, rng=rng)
            save_checkpoint(ckpt_dir / f"{stage}_latest.pt", stage=stage, epoch=epoch, step=step,
                            completed=completed, modules={"cwm": model}, optimizers=opts,
                            config=config, rng=rng)
            summary["checkpoint"] = p

        if first == 0:
            checkpoint(0, n_epochs == 0)
        for epoch in range(first + 1, n_epochs + 1):
            _set_epoch_lr(opts, config, stage, epoch, n_epochs)
            for _ in range(config.steps_per_epoch):
                pick = rng.choice(len(pairs), size=config.batch_size, replace=False)
                batch = cwm_batch(ds, [pairs[i] for i in pick], config.torch_dtype)
                t0 = time.time()
                record = _cwm_step(model, batch, config, stage, opts)
                step += 1
                record.update(stage=stage, epoch=epoch, step=step, seconds=round(time.time() - t0, 4))
                metrics.write(record)
                if "total" in record:
                    totals.append(record["total"])
                    monitor.update(record["total"])
            if stage == "cwm_joint" and val_views:
                s = self_pose_ssim(model, ds, val_views, config)
                summary["ssim"].append(s)
                metrics.write({"stage": stage, "epoch": epoch, "step": step, "val_self_ssim": s})
            checkpoint(epoch, epoch == n_epochs)
            if stop_after is not None and (stage, epoch) == tuple(stop_after):
                return summary
        done.add(stage)
    return summary


def _cwm_step(model: CWMModel, batch: dict, config: TrainConfig, stage: str, opts: dict) -> dict:
    weights = config.lambda_dict()
    if stage == "flow_pretrain":
        out = {"flows": estimate_flow(model.flow, batch["I_s"], batch["p_r"], batch["p_s"])}
        terms = flow_terms(model, batch, out["flows"], config)
        disc = None
    else:
        out = warp_reference(model, batch, config)
        terms, disc = cwm_terms(model, batch, out, config)
    record = _scalars(terms)
    try:
        total = full_objective(terms, weights)
    except NonFiniteLossError as exc:
        log.warning("skipping step: %s", exc)
        return {"skipped": exc.term, **record}
    opts["gen"].zero_grad(set_to_none=True)
    total.backward()
    opts["gen"].step()
    record["total"] = float(total.detach())
    if disc is not None:
        opts["disc"].zero_grad(set_to_none=True)
        if math.isfinite(float(disc.detach())):
            disc.backward()
            opts["disc"].step()
        record["disc"] = float(disc.detach())
    return record


def load_cwm(path, config: TrainConfig | None = None) -> tuple[CWMModel, TrainConfig]:
    blob = load_checkpoint(path)
    config = config or TrainConfig(**blob["config"])
    model = CWMModel(config).to(config.torch_dtype)
    model.load_state_dict(blob["modules"]["cwm"])
    model.eval()
    return model, config


# ---------------------------------------------------------------------------
# implicit fields
# ---------------------------------------------------------------------------

def _augment(img: torch.Tensor, rng: np.random.Generator, rgb: torch.Tensor | None = None):
    """Random channel permutation and gain, applied identically to colour targets."""
    perm = rng.permutation(3)
    gain = float(rng.uniform(0.6, 1.3))
    img = (img[perm] * gain).clamp(0, 1)
    if rgb is not None:
        rgb = (rgb[..., perm] * gain).clamp(0, 1)
    return img, rgb


def gdtm_batch(ds: SyntheticDataset, subjects, config: TrainConfig, rng: np.random.Generator,
               kind: str) -> dict:
    """Views with their cameras, point samples and targets, one random subject per view."""
    dtype = config.torch_dtype
    imgs, cams, pts, tgts, masks = [], [], [], [], []
    for _ in range(config.gdtm_views_per_step):
        sid = int(subjects[rng.integers(len(subjects))])
        views = ds.views_of(sid)
        item = ds.load_view(views[rng.integers(len(views))])
        s = ds.samples(sid)
        key_p, key_t = ("occ_points", "occ_labels") if kind == "geometry" else ("color_points", "color_rgb")
        idx = rng.integers(0, len(s[key_p]), config.gdtm_points_per_view)
        img = torch.as_tensor(item["image"], dtype=dtype)
        tgt = torch.as_tensor(s[key_t][idx], dtype=dtype)
        if config.color_augment:
            img, rgb = _augment(img, rng, tgt if kind == "texture" else None)
            tgt = rgb if kind == "texture" else tgt
        imgs.append(img)
        cams.append(item["camera"])
        pts.append(torch.as_tensor(s[key_p][idx], dtype=dtype))
        tgts.append(tgt)
        masks.append(label_mask(torch.as_tensor(item["parsing"], dtype=dtype)[None], TRANSFER_LABELS)[0])
    return {"image": torch.stack(imgs), "cameras": cams, "X": torch.stack(pts),
            "target": torch.stack(tgts), "S_c": torch.stack(masks)}


def _gdtm_subjects(ds, chosen):
    return list(chosen) if chosen is not None else ds.subject_ids("train")


def train_gdtm(config: TrainConfig, dataset, out_dir, cwm_checkpoint=None, model: ImplicitModel | None = None,
               stages=("gdtm_geometry", "gdtm_texture"), resume: str | Path | None = None) -> dict:
    """Geometry stage (occupancy MSE) then texture stage (colour MSE, geometry frozen).

    Trains on ground-truth rendered views; ``cwm_checkpoint`` is recorded
    for provenance only. Returns the model and the final checkpoint paths.
    """
    ds = dataset if isinstance(dataset, SyntheticDataset) else SyntheticDataset(dataset)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    metrics = MetricsLog(out_dir / "metrics.jsonl")
    torch.manual_seed(config.seed)
    if model is None:
        model = ImplicitModel(config.gdtm_feature_channels, config.gdtm_width, config.mlp_hidden)
    model = model.to(config.torch_dtype)
    rng = np.random.default_rng([config.seed, 7])
    start_step = {}
    if resume is not None:
        blob = load_checkpoint(resume)
        model.load_state_dict(blob["modules"]["gdtm"])
        _restore_rng(rng, blob["rng"])
        if not blob["completed"]:
            start_step[blob["stage"]] = blob["step"]
    summary = {"model": model, "checkpoints": {}, "losses": {}}
    for stage in stages:
        spec = STAGES[stage]
        if stage == "gdtm_texture" and not bool(model.geometry_trained):
            raise StageOrderError("gdtm_texture needs a completed gdtm_geometry checkpoint")
        geo = stage == "gdtm_geometry"
        trained = model.geometry_parameters() if geo else model.texture_parameters()
        frozen = model.texture_parameters() if geo else model.geometry_parameters()
        _assert_disjoint(trained, frozen)
        for p in frozen:
            p.requires_grad_(False)
        for p in trained:
            p.requires_grad_(True)
        opt = torch.optim.Adam(trained, lr=config.lr_gdtm)
        n_steps = config.geometry_steps if geo else config.texture_steps
        subjects = _gdtm_subjects(ds, config.geometry_subjects if geo else config.texture_subjects)
        monitor = DivergenceMonitor(config.divergence_factor, config.divergence_patience)
        losses = summary["losses"].setdefault(stage, [])
        first = start_step.get(stage, 0)
        if first:
            opt.load_state_dict(blob["optimizers"]["gdtm"])
        every = max(1, config.gdtm_checkpoint_every)

        def checkpoint(step, completed):
            for name in (f"{stage}_s{step:06d}.pt", f"{stage}_latest.pt"):
                p = save_checkpoint(ckpt_dir / name, stage=stage, epoch=0, step=step, completed=completed,
                                    modules={"gdtm": model}, optimizers={"gdtm": opt}, config=config, rng=rng)
            summary["checkpoints"][stage] = p
            if cwm_checkpoint is not None:
                metrics.write({"stage": stage, "step": step, "cwm_checkpoint": str(cwm_checkpoint)})

        for step in range(first + 1, n_steps + 1):
            batch = gdtm_batch(ds, subjects, config, rng, "geometry" if geo else "texture")
            t0 = time.time()
            if geo:
                pred = occupancy(model, batch["image"], batch["cameras"], batch["X"])
                loss, _ = regression_losses(pred, batch["target"], None, None)
                name = "regS"
            else:
                with torch.no_grad():
                    F_g = geometry_features(model, batch["image"])
                S_c = batch["S_c"]
                pred = texture(model, batch["image"], S_c, 1.0 - S_c, F_g, batch["cameras"], batch["X"])
                _, loss = regression_losses(None, None, pred, batch["target"])
                name = "regC"
            value = float(loss.detach())
            if not math.isfinite(value):
                log.warning("skipping step %d: %s not finite", step, name)
                metrics.write({"stage": stage, "step": step, "skipped": name})
                continue
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(value)
            metrics.write({"stage": stage, "step": step, name: value, "seconds": round(time.time() - t0, 4)})
            monitor.update(value)
            if step % every == 0 and step < n_steps:
                checkpoint(step, False)
        if geo:
            model.geometry_trained.fill_(True)
        else:
            model.texture_trained.fill_(True)
        checkpoint(n_steps, True)
    for p in model.parameters():
        p.requires_grad_(True)
    return summary


def load_gdtm(path, config: TrainConfig | None = None) -> ImplicitModel:
    blob = load_checkpoint(path)
    config = config or TrainConfig(**blob["config"])
    model = ImplicitModel(config.gdtm_feature_channels, config.gdtm_width, config.mlp_hidden)
    model.load_state_dict(blob["modules"]["gdtm"])
    model.to(config.torch_dtype).eval()
    return model
