"""Command-line entry point.

    garment-transfer [--config FILE] [--set key=value ...] <command> ...

The config file is YAML with optional ``dataset:`` and ``train:`` sections, or a flat
mapping of train keys (the ``config.yaml`` saved with a run).
``--set`` overrides train keys (``--set lr_cwm=1e-4``) or dataset keys with
a ``dataset.`` prefix. Default output locations live under
``$GARMENT_TRANSFER_ROOT`` (or ``./runs``).

Exit codes: 0 success, 1 validation error, 2 divergence or gradcheck failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import torch
import yaml

from .config import TrainConfig, parse_override
from .core import ValidationError
from .training import DivergenceError, NonFiniteLossError, StageOrderError

log = logging.getLogger("garment_transfer")

ROOT_ENV = "GARMENT_TRANSFER_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def output_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "runs"))


def load_configs(path, overrides) -> tuple[dict, TrainConfig]:
    """``(dataset_kwargs, train_config)`` from a YAML file plus ``key=value`` overrides."""
    from .synthdata import DatasetConfig
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        if raw and not {"dataset", "train"} & set(raw):
            # flat file as written by TrainConfig.save
            raw = {"train": raw}
    ds_kw = dict(raw.get("dataset") or {})
    train_kw = dict(raw.get("train") or {})
    extra = set(raw) - {"dataset", "train"}
    if extra:
        raise ValidationError(f"unknown config sections: {sorted(extra)}")
    for text in overrides or []:
        key, value = parse_override(text)
        if key.startswith("dataset."):
            ds_kw[key.split(".", 1)[1]] = value
        else:
            train_kw[key.removeprefix("train.")] = value
    known = {f.name for f in fields(DatasetConfig)}
    unknown = set(ds_kw) - known
    if unknown:
        raise ValidationError(f"unknown dataset keys: {sorted(unknown)}")
    return ds_kw, TrainConfig.load(None, train_kw)


def _dataset_dir(args) -> Path:
    return Path(args.dataset) if args.dataset else output_root() / "dataset"


def _latest(ckpt_dir: Path, stage: str) -> Path:
    return ckpt_dir / "checkpoints" / f"{stage}_latest.pt"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dataset_build(args, ds_kw, config):
    from .synthdata import build_dataset
    out = Path(args.out) if args.out else output_root() / "dataset"
    manifest = build_dataset(out, **ds_kw)
    print(f"wrote {len(manifest['views'])} views of {len(manifest['subjects'])} subjects to {out}")
    return EXIT_OK


def cmd_train_cwm(args, ds_kw, config):
    from .training import train_cwm
    torch.set_num_threads(args.threads)
    out = Path(args.out) if args.out else output_root() / "cwm"
    summary = train_cwm(config, _dataset_dir(args), out, resume=args.resume)
    print(json.dumps({"checkpoint": str(summary["checkpoint"]), "val_self_ssim": summary["ssim"][-1:]}))
    return EXIT_OK


def cmd_train_gdtm(args, ds_kw, config):
    from .training import train_gdtm
    torch.set_num_threads(args.threads)
    out = Path(args.out) if args.out else output_root() / "gdtm"
    stages = {"both": ("gdtm_geometry", "gdtm_texture"), "geometry": ("gdtm_geometry",),
              "texture": ("gdtm_texture",)}[args.stage]
    model = None
    if args.stage == "texture":
        from .training import load_gdtm
        geo = Path(args.geometry) if args.geometry else _latest(out, "gdtm_geometry")
        if not geo.exists():
            raise StageOrderError(f"gdtm_texture needs a completed gdtm_geometry checkpoint (looked for {geo})")
        model = load_gdtm(geo, config)
        model.train()
    summary = train_gdtm(config, _dataset_dir(args), out, cwm_checkpoint=args.cwm, model=model,
                         stages=stages, resume=args.resume)
    print(json.dumps({k: str(v) for k, v in summary["checkpoints"].items()}))
    return EXIT_OK


def _model_paths(args):
    cwm = Path(args.cwm) if args.cwm else _latest(output_root() / "cwm", "cwm_joint")
    gdtm = Path(args.gdtm) if args.gdtm else _latest(output_root() / "gdtm", "gdtm_texture")
    return cwm, gdtm


def cmd_infer(args, ds_kw, config):
    from .pipeline import run_inference
    cwm, gdtm = _model_paths(args)
    out = Path(args.out) if args.out else output_root() / "infer" / f"r{args.reference}_s{args.source}"
    res = run_inference(cwm, gdtm, _dataset_dir(args), args.reference, args.source, out,
                        resolution=args.resolution, seed=args.seed)
    print(json.dumps(res["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_eval(args, ds_kw, config):
    from . import pipeline
    from .synthdata import SyntheticDataset
    from .training import load_cwm, load_gdtm, validation_views
    ds = SyntheticDataset(_dataset_dir(args))
    cwm_path, gdtm_path = _model_paths(args)
    report = {}
    if cwm_path.exists():
        cwm, cfg = load_cwm(cwm_path)
        views = validation_views(ds, args.views)
        report["self_pose_ssim"] = pipeline.self_pose_scores(cwm, cfg, ds, views)
    if gdtm_path.exists():
        gdtm = load_gdtm(gdtm_path)
        sid = args.subject if args.subject is not None else ds.subject_ids("train")[0]
        report["occupancy_accuracy"] = pipeline.geometry_accuracy(gdtm, ds, sid)
        report["voxel_iou"] = pipeline.geometry_iou(gdtm, ds, sid)
        if bool(gdtm.texture_trained):
            report["texture_error"] = pipeline.texture_error(gdtm, ds, sid)
    if not report:
        raise ValidationError(f"no checkpoints found ({cwm_path}, {gdtm_path})")
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_gradcheck(args, ds_kw, config):
    from .gradcheck import run_gradcheck
    report = run_gradcheck(args.loss or None, seed=args.seed)
    for name, r in report.items():
        print(f"{name:8s} rel_err={r['rel_err']:.3e} {r['seconds']:.2f}s {'ok' if r['passed'] else 'FAIL'}")
    return EXIT_OK if all(r["passed"] for r in report.values()) else EXIT_FAILED


def cmd_export_mesh(args, ds_kw, config):
    from . import persist
    from .gdtm import occupancy_grid, reconstruct
    from .pipeline import view_batch
    from .synthdata import SyntheticDataset
    from .training import load_gdtm
    _, gdtm_path = _model_paths(args)
    if not gdtm_path.exists():
        raise ValidationError(f"no gdtm_texture checkpoint at {gdtm_path}; run `train gdtm` first")
    gdtm = load_gdtm(gdtm_path)
    ds = SyntheticDataset(_dataset_dir(args))
    view = view_batch(ds, args.view)
    mesh = reconstruct(gdtm, view["image"], view["camera"], resolution=args.resolution)
    out = Path(args.out) if args.out else output_root() / "meshes" / f"view_{args.view:04d}.ply"
    (persist.write_obj if out.suffix == ".obj" else persist.write_ply)(out, mesh)
    if args.grid:
        persist.save_occupancy_grid(args.grid, occupancy_grid(gdtm, view["image"], view["camera"], args.resolution))
    print(f"wrote {out} ({len(mesh.vertices)} vertices)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="garment-transfer", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="YAML file with dataset:/train: sections")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic dataset tools")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    b = ds_sub.add_parser("build", help="render subjects and write the manifest")
    b.add_argument("--out")
    b.set_defaults(func=cmd_dataset_build)

    tr = sub.add_parser("train", help="train a module")
    tr_sub = tr.add_subparsers(dest="module", required=True)
    c = tr_sub.add_parser("cwm", help="flow pretraining then joint warping training")
    c.add_argument("--dataset")
    c.add_argument("--out")
    c.add_argument("--resume")
    c.add_argument("--threads", type=int, default=1)
    c.set_defaults(func=cmd_train_cwm)
    g = tr_sub.add_parser("gdtm", help="implicit geometry then texture fields")
    g.add_argument("--dataset")
    g.add_argument("--out")
    g.add_argument("--cwm", help="warping checkpoint recorded for provenance")
    g.add_argument("--stage", choices=("both", "geometry", "texture"), default="both")
    g.add_argument("--geometry", help="geometry checkpoint for --stage texture")
    g.add_argument("--resume")
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_train_gdtm)

    i = sub.add_parser("infer", help="transfer the reference garment onto the source and reconstruct")
    i.add_argument("--dataset")
    i.add_argument("--reference", type=int, required=True, help="reference view index")
    i.add_argument("--source", type=int, required=True, help="source view index")
    i.add_argument("--cwm")
    i.add_argument("--gdtm")
    i.add_argument("--out")
    i.add_argument("--resolution", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="self-pose SSIM, occupancy accuracy, IoU and texture error")
    e.add_argument("--dataset")
    e.add_argument("--cwm")
    e.add_argument("--gdtm")
    e.add_argument("--subject", type=int)
    e.add_argument("--views", type=int, default=4)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    gc.add_argument("--loss", action="append", help="restrict to these losses (repeatable)")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-mesh", help="reconstruct one dataset view to PLY/OBJ")
    x.add_argument("--dataset")
    x.add_argument("--gdtm")
    x.add_argument("--view", type=int, required=True)
    x.add_argument("--out", help="output .ply or .obj")
    x.add_argument("--grid", help="also dump the occupancy grid here")
    x.add_argument("--resolution", type=int, default=64)
    x.set_defaults(func=cmd_export_mesh, cwm=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ds_kw, config = load_configs(args.config, args.overrides)
        return args.func(args, ds_kw, config)
    except (DivergenceError, NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValidationError, StageOrderError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
