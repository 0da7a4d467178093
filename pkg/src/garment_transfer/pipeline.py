"""End-to-end inference: warp, composite, reconstruct, and region-tagged evaluation."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import persist
from .config import TrainConfig
from .core import TRANSFER_LABELS, TexturedMesh, ValidationError, label_mask, to_numpy_image
from .gdtm import (ImplicitModel, composite, geometry_features, layout_masks, occupancy, occupancy_grid,
                   reconstruct, texture, view_to_world, world_to_view)
from .geometry import voxel_iou
from .marching_cubes import marching_cubes
from .metrics import ssim
from .synthdata import SyntheticDataset
from .training import CWMModel, load_checkpoint, load_cwm, load_gdtm, warp_reference


class MissingCheckpointError(ValidationError):
    def __init__(self, stage: str, path):
        super().__init__(f"no checkpoint for stage {stage!r} at {path}; run `garment-transfer train "
                         f"{'cwm' if stage.startswith('cwm') or stage == 'flow_pretrain' else 'gdtm'}` first")
        self.stage = stage


def view_batch(ds: SyntheticDataset, index: int, dtype=torch.float32) -> dict:
    item = ds.load_view(index)
    t = lambda key: torch.as_tensor(item[key], dtype=dtype)[None]  # noqa: E731
    return {"image": t("image"), "parsing": t("parsing"), "keypoints": t("keypoints"),
            "camera": item["camera"], "subject_id": item["subject_id"], "angle": item["angle"]}


@torch.no_grad()
def transfer(cwm: CWMModel, config: TrainConfig, reference: dict, source: dict) -> dict:
    """Warp the reference person into the source pose and composite the garment.

    Returns ``w_r`` (refined warp), ``w_r_s`` (source with transferred
    garment and arms) and the layout masks.
    """
    batch = {"I_r": reference["image"], "parsing_r": reference["parsing"], "p_r": reference["keypoints"],
             "I_s": source["image"], "parsing_s": source["parsing"], "p_s": source["keypoints"]}
    out = warp_reference(cwm, batch, config)
    S_c, S_im = layout_masks(out["parsing_warped"], source["parsing"])
    w_r_s = composite(source["image"], out["w_r"], S_c, S_im)
    return {"w_r": out["w_r"], "w_r_prime": out["combined"], "w_r_s": w_r_s,
            "S_c": S_c, "S_im": S_im, "parsing_warped": out["parsing_warped"]}


@torch.no_grad()
def reconstruct_transfer(gdtm: ImplicitModel, config: TrainConfig, result: dict, source: dict,
                         resolution: int | None = None) -> TexturedMesh:
    """Textured mesh of the composited person, in the source view frame."""
    tex = result["w_r_s"] if config.texture_input == "composite" else result["w_r"]
    return reconstruct(gdtm, result["w_r_s"], source["camera"], result["S_c"], result["S_im"],
                       resolution or config.grid_resolution, texture_image=tex)


def region_tags(mesh: TexturedMesh, subject, camera) -> np.ndarray:
    """Body-part label of the ground-truth part nearest to each (view-frame) vertex."""
    world = mesh.vertices @ view_to_world(camera).T
    return subject.region_at(world)


def region_mean_colors(mesh: TexturedMesh, tags: np.ndarray, labels=TRANSFER_LABELS) -> dict:
    garment = np.isin(tags, labels)
    cols = np.asarray(mesh.vertex_colors)
    mean = lambda sel: cols[sel].mean(axis=0) if sel.any() else np.full(3, np.nan)  # noqa: E731
    return {"garment": mean(garment), "other": mean(~garment),
            "n_garment": int(garment.sum()), "n_other": int((~garment).sum())}


def garment_swap_change(swap: TexturedMesh, self_mesh: TexturedMesh, subject, camera) -> dict:
    """Mean-colour change inside and outside the transferred region between two reconstructions.

    Each mesh is tagged against the source subject's body parts; the change is
    the L2 distance between region mean colours.
    """
    a = region_mean_colors(swap, region_tags(swap, subject, camera))
    b = region_mean_colors(self_mesh, region_tags(self_mesh, subject, camera))
    return {"garment_change": float(np.linalg.norm(a["garment"] - b["garment"])),
            "other_change": float(np.linalg.norm(a["other"] - b["other"])),
            "swap": a, "self": b}


def load_models(cwm_path, gdtm_path, dtype: str | None = None):
    for stage, path in (("cwm_joint", cwm_path), ("gdtm_texture", gdtm_path)):
        if path is None or not Path(path).exists():
            raise MissingCheckpointError(stage, path)
    blob = load_checkpoint(cwm_path)
    if blob["stage"] != "cwm_joint" or not blob["completed"]:
        raise MissingCheckpointError("cwm_joint", cwm_path)
    cwm, config = load_cwm(cwm_path)
    gblob = load_checkpoint(gdtm_path)
    if gblob["stage"] != "gdtm_texture" or not gblob["completed"]:
        raise MissingCheckpointError("gdtm_texture", gdtm_path)
    gdtm = load_gdtm(gdtm_path)
    if dtype is not None:
        config = config.replace(dtype=dtype)
    cwm.to(config.torch_dtype)
    gdtm.to(config.torch_dtype)
    return cwm, gdtm, config


def run_inference(cwm_path, gdtm_path, dataset, reference: int, source: int, out_dir,
                  resolution: int | None = None, seed: int = 0) -> dict:
    """Write ``w_r.png``, ``w_r_s.png``, ``mesh.ply``, ``mesh.obj`` and ``metrics.json``."""
    torch.manual_seed(seed)
    ds = dataset if isinstance(dataset, SyntheticDataset) else SyntheticDataset(dataset)
    cwm, gdtm, config = load_models(cwm_path, gdtm_path)
    ref = view_batch(ds, reference, config.torch_dtype)
    src = view_batch(ds, source, config.torch_dtype)
    result = transfer(cwm, config, ref, src)
    mesh = reconstruct_transfer(gdtm, config, result, src, resolution)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    persist.save_image(out / "w_r.png", to_numpy_image(result["w_r"][0]))
    persist.save_image(out / "w_r_s.png", to_numpy_image(result["w_r_s"][0]))
    persist.write_ply(out / "mesh.ply", mesh)
    persist.write_obj(out / "mesh.obj", mesh)
    metrics = {
        "reference": reference, "source": source,
        "ssim_w_r_vs_source": ssim(result["w_r"][0], src["image"][0]),
        "ssim_w_r_s_vs_source": ssim(result["w_r_s"][0], src["image"][0]),
        "transfer_fraction": float(result["S_c"].mean()),
        "n_vertices": int(len(mesh.vertices)), "n_faces": int(len(mesh.faces)),
        "watertight": bool(mesh.is_watertight()) if not mesh.is_empty() else False,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return {"metrics": metrics, "mesh": mesh, "result": result,
            "files": {k: str(out / k) for k in ("w_r.png", "w_r_s.png", "mesh.ply", "mesh.obj", "metrics.json")}}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@torch.no_grad()
def geometry_accuracy(gdtm: ImplicitModel, ds: SyntheticDataset, subject_id: int, angle: float = 0.0,
                      dtype=torch.float32) -> float:
    """Held-out occupancy accuracy against the ray-parity labels, from one view."""
    view = view_batch(ds, ds.view_index(subject_id, angle), dtype)
    s = ds.samples(subject_id)
    X = torch.as_tensor(s["heldout_points"], dtype=dtype)[None]
    pred = occupancy(gdtm, view["image"], view["camera"], X)[0].numpy()
    return float(((pred > 0.5) == (s["heldout_labels"] > 0.5)).mean())


@torch.no_grad()
def geometry_iou(gdtm: ImplicitModel, ds: SyntheticDataset, subject_id: int, angle: float = 0.0,
                 resolution: int = 64, dtype=torch.float32) -> float:
    """Voxel IoU between the extracted surface and the ground-truth mesh (view frame)."""
    view = view_batch(ds, ds.view_index(subject_id, angle), dtype)
    mesh = marching_cubes(occupancy_grid(gdtm, view["image"], view["camera"], resolution), 0.5)
    if mesh.is_empty():
        return 0.0
    gt = ds.mesh(subject_id).transformed(world_to_view(view["camera"]))
    return voxel_iou(mesh, gt)


@torch.no_grad()
def texture_error(gdtm: ImplicitModel, ds: SyntheticDataset, subject_id: int, angle: float = 0.0,
                  dtype=torch.float32) -> float:
    """Mean per-vertex RGB distance (L2 over channels) on the ground-truth surface, from one view.

    The view's own parsing supplies the garment mask, as during training.
    """
    view = view_batch(ds, ds.view_index(subject_id, angle), dtype)
    mesh = ds.mesh(subject_id)
    S_c = label_mask(view["parsing"], TRANSFER_LABELS)
    F_g = geometry_features(gdtm, view["image"])
    X = torch.as_tensor(mesh.vertices, dtype=dtype)[None]
    pred = texture(gdtm, view["image"], S_c, 1 - S_c, F_g, view["camera"], X)[0].numpy()
    return float(np.linalg.norm(pred - mesh.vertex_colors, axis=1).mean())


def self_pose_scores(cwm: CWMModel, config: TrainConfig, ds: SyntheticDataset, views) -> list[float]:
    """SSIM of the refined self-warp ``w_r`` against each view."""
    out = []
    for v in views:
        item = view_batch(ds, v, config.torch_dtype)
        res = transfer(cwm, config, item, item)
        out.append(ssim(res["w_r"][0], item["image"][0]))
    return out
