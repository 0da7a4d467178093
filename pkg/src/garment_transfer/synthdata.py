"""Procedural clothed humanoids, a Lambertian/SH rasterizer and dataset layout.

Bodies are the smooth union of capsules and ellipsoids, meshed with marching
cubes on the signed distance field so every body is a single watertight
surface. Each triangle and vertex carries a parsing label decided by which
primitive is closest and how far along its limb the point sits, so parsing
maps come straight out of the rasterizer's triangle ids.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import persist
from .core import (ARM_GARMENT, ARMS_SKIN, BACKGROUND, FEET, HEAD, LEGS_GARMENT, LEGS_SKIN,
                   N_LABELS, TORSO_GARMENT, OccupancyGrid, TexturedMesh, ValidationError,
                   WeakPerspectiveCamera, keypoint_field)
from .geometry import bbox_diagonal, point_in_mesh, sample_color_points, sample_occupancy_points
from .marching_cubes import marching_cubes

log = logging.getLogger(__name__)

JOINT_NAMES = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
N_JOINTS = len(JOINT_NAMES)

SDF_SPACING = 0.025
SMOOTH_UNION = 0.02


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionTexture:
    base: tuple
    accent: tuple = (0.0, 0.0, 0.0)
    pattern: str = "solid"  # solid | stripes | checks
    period: float = 0.1

    def albedo(self, points: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(np.asarray(self.base, dtype=np.float64), (len(points), 3))
        if self.pattern == "solid":
            return base.copy()
        accent = np.asarray(self.accent, dtype=np.float64)
        cells = np.floor(points / self.period).astype(np.int64)
        if self.pattern == "stripes":
            use = cells[:, 1] % 2 == 1
        elif self.pattern == "checks":
            use = cells.sum(axis=1) % 2 == 1
        else:
            raise ValidationError(f"unknown texture pattern {self.pattern!r}")
        out = base.copy()
        out[use] = accent
        return out


@dataclass(frozen=True)
class GarmentSpec:
    top: RegionTexture
    bottom: RegionTexture
    long_sleeves: bool = True
    long_pants: bool = True

    @classmethod
    def random(cls, rng: np.random.Generator) -> "GarmentSpec":
        def garment():
            hue = rng.random()
            base = _hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.55, 0.95))
            accent = _hsv_to_rgb((hue + rng.uniform(0.3, 0.7)) % 1.0, rng.uniform(0.2, 0.8),
                                 rng.uniform(0.2, 0.95))
            pattern = ("solid", "stripes", "checks")[rng.integers(3)]
            return RegionTexture(base, accent, pattern, float(rng.uniform(0.06, 0.12)))

        return cls(top=garment(), bottom=garment(), long_sleeves=bool(rng.random() < 0.5),
                   long_pants=bool(rng.random() < 0.6))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GarmentSpec":
        return cls(top=RegionTexture(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["top"].items()}),
                   bottom=RegionTexture(**{k: tuple(v) if isinstance(v, list) else v
                                           for k, v in d["bottom"].items()}),
                   long_sleeves=d["long_sleeves"], long_pants=d["long_pants"])


def _hsv_to_rgb(h, s, v) -> tuple:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


# ---------------------------------------------------------------------------
# body model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Part:
    name: str
    kind: str               # capsule | ellipsoid
    a: tuple                # capsule start / ellipsoid centre
    b: tuple = (0.0, 0.0, 0.0)
    radius: tuple = (0.1,)  # capsule: (r,), ellipsoid: (rx, ry, rz)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a)
        if self.kind == "capsule":
            b = np.asarray(self.b)
            ab = b - a
            t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
            return np.linalg.norm(p - (a + t[:, None] * ab), axis=1) - self.radius[0]
        r = np.asarray(self.radius)
        k = np.linalg.norm((p - a) / r, axis=1)
        return (k - 1.0) * r.min()

    def along(self, p: np.ndarray) -> np.ndarray:
        """Normalised position along a capsule axis (0 at ``a``)."""
        a, b = np.asarray(self.a), np.asarray(self.b)
        ab = b - a
        return np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)


@dataclass
class SyntheticSubject:
    subject_id: int
    seed: int
    parts: tuple
    garment_spec: GarmentSpec
    textures: dict
    joints: np.ndarray
    body_mesh: TexturedMesh = None
    face_labels: np.ndarray = None
    vertex_labels: np.ndarray = None
    sleeve_frac: float = 1.0
    pants_frac: float = 1.0

    def region_at(self, points: np.ndarray) -> np.ndarray:
        """Parsing label of the body part nearest to each point."""
        points = np.atleast_2d(points)
        d = np.stack([p.sdf(points) for p in self.parts], axis=1)
        nearest = d.argmin(axis=1)
        labels = np.empty(len(points), dtype=np.int64)
        for i, part in enumerate(self.parts):
            sel = nearest == i
            if not sel.any():
                continue
            name = part.name
            if name in ("head", "neck"):
                labels[sel] = HEAD
            elif name == "torso":
                labels[sel] = TORSO_GARMENT
            elif name.startswith("arm"):
                t = part.along(points[sel])
                labels[sel] = np.where(t < self.sleeve_frac, ARM_GARMENT, ARMS_SKIN)
            elif name.startswith("hand"):
                labels[sel] = ARMS_SKIN
            elif name.startswith("leg"):
                t = part.along(points[sel])
                labels[sel] = np.where(t < self.pants_frac, LEGS_GARMENT, LEGS_SKIN)
            elif name.startswith("foot"):
                labels[sel] = FEET
            else:
                raise ValidationError(f"unlabelled part {name}")
        return labels

    def albedo(self, points: np.ndarray, labels: np.ndarray) -> np.ndarray:
        out = np.zeros((len(points), 3))
        for label in np.unique(labels):
            sel = labels == label
            out[sel] = self.textures[int(label)].albedo(points[sel])
        return out

    def sdf(self, points: np.ndarray) -> np.ndarray:
        d = np.stack([p.sdf(points) for p in self.parts], axis=1)
        return _smooth_min(d, SMOOTH_UNION)

    def with_textures(self, textures: dict) -> "SyntheticSubject":
        """Copy with replaced per-label textures and recomputed vertex colours."""
        sub = replace(self, textures=dict(textures))
        mesh = sub.body_mesh
        sub.body_mesh = TexturedMesh(mesh.vertices, mesh.faces,
                                     sub.albedo(mesh.vertices, sub.vertex_labels))
        return sub


def _smooth_min(d: np.ndarray, k: float) -> np.ndarray:
    """Polynomial smooth minimum folded across columns."""
    out = d[:, 0]
    for j in range(1, d.shape[1]):
        b = d[:, j]
        h = np.clip(0.5 + 0.5 * (b - out) / k, 0.0, 1.0)
        out = b * (1 - h) + out * h - k * h * (1 - h)
    return out


def generate_subject(seed: int, garment_spec: GarmentSpec | None = None,
                     subject_id: int | None = None) -> SyntheticSubject:
    """Deterministic capsule-composite humanoid for ``seed``."""
    rng = np.random.default_rng([seed, 7919])
    drawn = GarmentSpec.random(rng)
    spec = garment_spec if garment_spec is not None else drawn
    u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731

    head_r = u(0.095, 0.115)
    neck_top = 0.84 - 2 * head_r
    head_c = (0.0, neck_top + head_r * 0.95, 0.0)
    torso_rx, torso_ry, torso_rz = u(0.18, 0.23), u(0.28, 0.32), u(0.11, 0.14)
    torso_c = (0.0, neck_top - 0.06 - torso_ry, 0.0)
    shoulder_y = torso_c[1] + torso_ry * 0.75
    arm_r = u(0.055, 0.07)
    arm_len = u(0.52, 0.6)
    spread = np.deg2rad(u(14.0, 30.0))
    hip_y = torso_c[1] - torso_ry * 0.7
    hip_x = u(0.08, 0.11)
    leg_r = u(0.08, 0.1)
    ankle_y = -0.80
    leg_spread = u(0.0, 0.06)
    skin = _hsv_to_rgb(u(0.03, 0.1), u(0.25, 0.6), u(0.45, 0.95))
    shoes = _hsv_to_rgb(u(0.0, 1.0), u(0.0, 0.4), u(0.1, 0.3))

    parts = [
        Part("head", "ellipsoid", head_c, radius=(head_r * 0.9, head_r, head_r * 0.95)),
        Part("neck", "capsule", (0.0, torso_c[1] + torso_ry * 0.8, 0.0), (0.0, head_c[1], 0.0),
             radius=(head_r * 0.45,)),
        Part("torso", "ellipsoid", torso_c, radius=(torso_rx, torso_ry, torso_rz)),
    ]
    joints = {"head": head_c, "neck": (0.0, neck_top, 0.0)}
    for side, sx in (("r", -1.0), ("l", 1.0)):
        shoulder = np.array([sx * (torso_rx - arm_r * 0.3), shoulder_y, 0.0])
        wrist = shoulder + arm_len * np.array([sx * np.sin(spread), -np.cos(spread), 0.0])
        hip = np.array([sx * hip_x, hip_y, 0.0])
        ankle = np.array([sx * (hip_x + leg_spread), ankle_y, 0.0])
        hand_c = wrist + 0.05 * (wrist - shoulder) / arm_len
        parts += [
            Part(f"arm_{side}", "capsule", tuple(shoulder), tuple(wrist), radius=(arm_r,)),
            Part(f"hand_{side}", "ellipsoid", tuple(hand_c), radius=(arm_r * 0.8, arm_r * 1.3, arm_r * 0.6)),
            Part(f"leg_{side}", "capsule", tuple(hip), tuple(ankle), radius=(leg_r,)),
            Part(f"foot_{side}", "capsule", tuple(ankle + [0, -0.05, 0.0]), tuple(ankle + [0, -0.07, 0.12]),
                 radius=(0.05,)),
        ]
        joints[f"{side}_shoulder"] = tuple(shoulder)
        joints[f"{side}_elbow"] = tuple((shoulder + wrist) / 2)
        joints[f"{side}_wrist"] = tuple(wrist)
        joints[f"{side}_hip"] = tuple(hip)
        joints[f"{side}_knee"] = tuple((hip + ankle) / 2)
        joints[f"{side}_ankle"] = tuple(ankle)

    skin_tex = RegionTexture(skin)
    textures = {
        HEAD: skin_tex, ARMS_SKIN: skin_tex, LEGS_SKIN: skin_tex,
        TORSO_GARMENT: spec.top, ARM_GARMENT: spec.top,
        LEGS_GARMENT: spec.bottom, FEET: RegionTexture(shoes),
    }
    subject = SyntheticSubject(
        subject_id=seed if subject_id is None else subject_id, seed=seed, parts=tuple(parts),
        garment_spec=spec, textures=textures,
        joints=np.array([joints[n] for n in JOINT_NAMES], dtype=np.float64),
        sleeve_frac=0.92 if spec.long_sleeves else 0.35,
        pants_frac=0.95 if spec.long_pants else 0.45,
    )

    lo = np.array([-0.95, -0.97, -0.4])
    hi = np.array([0.95, 0.92, 0.4])
    res = np.ceil((hi - lo) / SDF_SPACING).astype(int) + 1
    pts = np.stack(np.meshgrid(*[np.linspace(l, h, r) for l, h, r in zip(lo, hi, res)],
                               indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = subject.sdf(pts).reshape(tuple(res))
    if sdf[0].min() <= 0 or sdf[-1].min() <= 0 or sdf[:, 0].min() <= 0 or sdf[:, -1].min() <= 0 \
            or sdf[:, :, 0].min() <= 0 or sdf[:, :, -1].min() <= 0:
        raise ValidationError("body does not fit inside its meshing volume")
    mesh = marching_cubes(-sdf, 0.0, lo, hi)
    centroids = mesh.triangles.mean(axis=1)
    subject.face_labels = subject.region_at(centroids)
    subject.vertex_labels = subject.region_at(mesh.vertices)
    subject.body_mesh = TexturedMesh(mesh.vertices, mesh.faces,
                                     subject.albedo(mesh.vertices, subject.vertex_labels))
    return subject


# ---------------------------------------------------------------------------
# lighting and rasterization
# ---------------------------------------------------------------------------

_SH_BAND_SCALE = np.array([np.pi] + [2 * np.pi / 3] * 3 + [np.pi / 4] * 5)


def sh_basis(n: np.ndarray) -> np.ndarray:
    """Real spherical-harmonic basis up to order 2 for unit vectors ``(N, 3)``."""
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    return np.stack([
        0.282095 * np.ones_like(x),
        0.488603 * y, 0.488603 * z, 0.488603 * x,
        1.092548 * x * y, 1.092548 * y * z, 0.315392 * (3 * z * z - 1),
        1.092548 * x * z, 0.546274 * (x * x - y * y),
    ], axis=1)


def sh_shading(normals: np.ndarray, lighting: np.ndarray) -> np.ndarray:
    """Lambertian irradiance over pi for view-space normals; ``(N,)`` or ``(N, 3)``."""
    lighting = np.asarray(lighting, dtype=np.float64)
    coeff = _SH_BAND_SCALE[:, None] * lighting.reshape(9, -1) / np.pi
    out = sh_basis(normals) @ coeff
    return out[:, 0] if lighting.ndim == 1 else out


def ambient_lighting(level: float = 1.0) -> np.ndarray:
    sh = np.zeros(9)
    sh[0] = level / 0.282095
    return sh


def random_lighting(rng: np.random.Generator) -> np.ndarray:
    """Mild ambient-dominated lighting with a frontal key light."""
    sh = ambient_lighting(rng.uniform(0.72, 0.82))
    direction = np.array([rng.uniform(-0.4, 0.4), rng.uniform(0.1, 0.5), 1.0])
    direction /= np.linalg.norm(direction)
    strength = rng.uniform(0.18, 0.28)
    # first-order band of a clamped-cosine lobe pointing along ``direction``
    sh[1:4] = strength * np.array([direction[1], direction[2], direction[0]]) / 0.488603 / 2.0
    return sh


# camera frame (x right, y down, z away) to view frame (x right, y up, z toward viewer)
_CAM_TO_VIEW = np.diag([1.0, -1.0, -1.0])


@dataclass
class RenderedView:
    image: np.ndarray           # (H, W, 3) float32 on the 8-bit lattice
    labels: np.ndarray          # (H, W) uint8 parsing labels
    keypoints: np.ndarray       # (J, H, W) float32
    camera: WeakPerspectiveCamera
    subject_id: int
    view_angle: float
    face_ids: np.ndarray = None     # (H, W) int, -1 on background
    hit_points: np.ndarray = None   # (H, W, 3) world positions of visible surface
    lighting: np.ndarray = None

    @property
    def parsing(self) -> np.ndarray:
        """One-hot ``(N_LABELS, H, W)`` parsing map."""
        return np.eye(N_LABELS, dtype=np.float32)[self.labels].transpose(2, 0, 1)


def rasterize(mesh: TexturedMesh, camera: WeakPerspectiveCamera, height: int, width: int):
    """Z-buffered coverage: per-pixel face id (or -1), barycentrics and depth."""
    xy, z = camera.project(mesh.vertices)
    tri_xy = xy[mesh.faces]
    tri_z = z[mesh.faces]
    lo = np.ceil(tri_xy.min(axis=1)).astype(int)
    hi = np.floor(tri_xy.max(axis=1)).astype(int)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    span = np.maximum(hi - lo + 1, 0)
    count = span[:, 0] * span[:, 1]
    fid = np.repeat(np.arange(len(mesh.faces)), count)
    local = np.arange(len(fid)) - np.repeat(np.cumsum(count) - count, count)
    px = lo[fid, 0] + local % np.maximum(span[fid, 0], 1)
    py = lo[fid, 1] + local // np.maximum(span[fid, 0], 1)

    v = tri_xy[fid]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    rx = px - v[:, 0, 0]
    ry = py - v[:, 0, 1]
    den = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    ok = np.abs(den) > 1e-12
    den = np.where(ok, den, 1.0)
    b1 = (rx * d2[:, 1] - ry * d2[:, 0]) / den
    b2 = (d1[:, 0] * ry - d1[:, 1] * rx) / den
    b0 = 1 - b1 - b2
    eps = -1e-9
    inside = ok & (b0 >= eps) & (b1 >= eps) & (b2 >= eps)
    fid, px, py = fid[inside], px[inside], py[inside]
    bary = np.stack([b0, b1, b2], axis=1)[inside]
    depth = np.einsum("ij,ij->i", bary, tri_z[fid])

    pix = py * width + px
    order = np.lexsort((fid, depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    face_ids = np.full(height * width, -1, dtype=np.int64)
    face_ids[pix[win]] = fid[win]
    bary_img = np.zeros((height * width, 3))
    bary_img[pix[win]] = bary[win]
    depth_img = np.full(height * width, np.inf)
    depth_img[pix[win]] = depth[win]
    return face_ids.reshape(height, width), bary_img.reshape(height, width, 3), depth_img.reshape(height, width)


def render_view(subject: SyntheticSubject, angle: float, lighting=None,
                image_size: int = 128) -> RenderedView:
    """Render ``subject`` turned by ``angle`` degrees about the vertical axis."""
    if not 0.0 <= angle < 360.0:
        raise ValidationError(f"view angle must lie in [0, 360), got {angle}")
    lighting = ambient_lighting() if lighting is None else np.asarray(lighting, dtype=np.float64)
    camera = WeakPerspectiveCamera.orbit(angle, image_size)
    mesh = subject.body_mesh
    xy, _ = camera.project(mesh.vertices)
    if xy.min() < 0 or xy.max() > image_size - 1:
        raise ValidationError("subject projects outside the image")

    face_ids, bary, _ = rasterize(mesh, camera, image_size, image_size)
    fg = face_ids >= 0
    fids = face_ids[fg]
    hit = np.einsum("ij,ijk->ik", bary[fg], mesh.triangles[fids])
    labels = subject.face_labels[fids]
    albedo = subject.albedo(hit, labels)
    normals = mesh.face_normals()[fids] @ (_CAM_TO_VIEW @ camera.rotation).T
    shade = sh_shading(normals, lighting)
    if shade.ndim == 1:
        shade = shade[:, None]
    color = persist.quantize(albedo * shade)

    image = np.zeros((image_size, image_size, 3), dtype=np.float32)
    image[fg] = color
    label_img = np.full((image_size, image_size), BACKGROUND, dtype=np.uint8)
    label_img[fg] = labels
    hit_img = np.zeros((image_size, image_size, 3))
    hit_img[fg] = hit
    joints_xy, _ = camera.project(subject.joints)
    return RenderedView(image=image, labels=label_img,
                        keypoints=keypoint_field(joints_xy, image_size, image_size),
                        camera=camera, subject_id=subject.subject_id, view_angle=float(angle),
                        face_ids=face_ids, hit_points=hit_img, lighting=lighting)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_train_subjects: int = 8
    n_test_subjects: int = 2
    views_per_subject: int = 24
    image_size: int = 128
    seed: int = 0
    n_uniform: int = 8000
    n_surface: int = 8000
    n_color: int = 8000
    n_heldout: int = 10000
    occupancy_sigma_frac: float = 0.05
    color_sigma_frac: float = 0.01
    pairs_per_subject: int | None = None   # None: every ordered cross-view pair

    @property
    def n_subjects(self) -> int:
        return self.n_train_subjects + self.n_test_subjects

    def angles(self) -> list[float]:
        return [360.0 * k / self.views_per_subject for k in range(self.views_per_subject)]


def dataset_budget(n_subjects: int, views_per_subject: int, pairs_per_subject: int | None = None) -> dict:
    """Image and pair counts implied by a rendering protocol."""
    pairs = views_per_subject * (views_per_subject - 1) if pairs_per_subject is None else pairs_per_subject
    return {"images": n_subjects * views_per_subject, "pairs": n_subjects * pairs}


def subject_seed(seed: int, subject_id: int) -> int:
    return int(np.random.SeedSequence([seed, subject_id]).generate_state(1)[0])


def view_rng(seed: int, subject_id: int, angle: float) -> np.random.Generator:
    return np.random.default_rng([seed, subject_id, int(round(angle * 1000))])


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def build_dataset(out_dir, config: DatasetConfig | None = None, **overrides) -> dict:
    """Render every subject and view into ``out_dir`` and write ``manifest.json``.

    Layout: ``images/``, ``parsing/``, ``keypoints/``, ``meshes/``, ``samples/``.
    Subjects ``0 .. n_train-1`` are the training split, the rest are test.
    """
    config = replace(config or DatasetConfig(), **overrides)
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc

    subjects, views = [], []
    for sid in range(config.n_subjects):
        split = "train" if sid < config.n_train_subjects else "test"
        subject = generate_subject(subject_seed(config.seed, sid), subject_id=sid)
        mesh = subject.body_mesh
        mesh_path = root / "meshes" / f"subject_{sid:03d}.ply"
        persist.write_ply(mesh_path, mesh)
        persist.save_array(root / "meshes" / f"subject_{sid:03d}_vertices.npy", mesh.vertices)
        persist.save_array(root / "meshes" / f"subject_{sid:03d}_colors.npy", mesh.vertex_colors)
        persist.save_array(root / "meshes" / f"subject_{sid:03d}_faces.npy", mesh.faces)
        persist.save_array(root / "meshes" / f"subject_{sid:03d}_face_labels.npy", subject.face_labels)
        persist.save_array(root / "meshes" / f"subject_{sid:03d}_vertex_labels.npy", subject.vertex_labels)

        rng = np.random.default_rng([config.seed, sid, 1])
        diag = bbox_diagonal(mesh)
        occ_pts, occ_lab = sample_occupancy_points(mesh, config.n_uniform, config.n_surface,
                                                   config.occupancy_sigma_frac * diag, rng)
        col_pts, col_rgb = sample_color_points(mesh, config.n_color, config.color_sigma_frac * diag, rng)
        held_rng = np.random.default_rng([config.seed, sid, 2])
        held_pts, held_lab = sample_occupancy_points(mesh, config.n_heldout // 2, config.n_heldout // 2,
                                                     config.occupancy_sigma_frac * diag, held_rng)
        samples_path = root / "samples" / f"subject_{sid:03d}.npz"
        samples_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(samples_path, occ_points=occ_pts, occ_labels=occ_lab, color_points=col_pts,
                 color_rgb=col_rgb, heldout_points=held_pts, heldout_labels=held_lab)

        subjects.append({
            "subject_id": sid, "seed": subject.seed, "split": split,
            "mesh": _rel(mesh_path, root), "samples": _rel(samples_path, root),
            "garment_spec": subject.garment_spec.to_dict(),
            "joints": subject.joints.tolist(),
        })
        for angle in config.angles():
            view = render_view(subject, angle, random_lighting(view_rng(config.seed, sid, angle)),
                               config.image_size)
            stem = f"{sid:03d}_{int(round(angle * 1000)):06d}"
            paths = {
                "image": root / "images" / f"{stem}.png",
                "parsing": root / "parsing" / f"{stem}.png",
                "keypoints": root / "keypoints" / f"{stem}.npy",
            }
            persist.save_image(paths["image"], view.image)
            persist.save_labels(paths["parsing"], view.labels)
            persist.save_array(paths["keypoints"], view.keypoints)
            views.append({"subject_id": sid, "angle": angle, "split": split,
                          "camera": view.camera.to_dict(),
                          **{k: _rel(p, root) for k, p in paths.items()}})
        log.info("subject %d rendered (%d views)", sid, len(config.angles()))

    manifest = {"config": asdict(config), "subjects": subjects, "views": views}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def enumerate_pairs(manifest: dict, split: str = "train", pairs_per_subject: int | None = None,
                    seed: int = 0) -> list[tuple[int, int]]:
    """Ordered (reference, source) index pairs into ``manifest['views']``.

    Pairs never cross subjects and never repeat an angle.
    """
    by_subject: dict[int, list[int]] = {}
    for i, v in enumerate(manifest["views"]):
        if v["split"] == split:
            by_subject.setdefault(v["subject_id"], []).append(i)
    pairs = []
    rng = np.random.default_rng(seed)
    for sid in sorted(by_subject):
        idx = by_subject[sid]
        cand = [(a, b) for a in idx for b in idx if a != b]
        if pairs_per_subject is not None and pairs_per_subject < len(cand):
            pick = rng.choice(len(cand), size=pairs_per_subject, replace=False)
            cand = [cand[k] for k in sorted(pick)]
        pairs += cand
    return pairs


def sample_pair(manifest: dict, rng: np.random.Generator, split: str | None = None) -> tuple[dict, dict]:
    """Draw a (reference, source) pair of distinct views of one subject."""
    by_subject: dict[int, list[dict]] = {}
    for v in manifest["views"]:
        if split is None or v["split"] == split:
            by_subject.setdefault(v["subject_id"], []).append(v)
    eligible = sorted(s for s, vs in by_subject.items() if len({v["angle"] for v in vs}) >= 2)
    if not eligible:
        raise ValidationError("manifest has no subject with two or more views")
    sid = eligible[rng.integers(len(eligible))]
    views = by_subject[sid]
    i, j = rng.choice(len(views), size=2, replace=False)
    while views[i]["angle"] == views[j]["angle"]:
        i, j = rng.choice(len(views), size=2, replace=False)
    return views[i], views[j]


class SyntheticDataset:
    """In-memory access to a built dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self.config = DatasetConfig(**self.manifest["config"])
        self.views = self.manifest["views"]
        self._cache: dict = {}

    def __len__(self):
        return len(self.views)

    def view_index(self, subject_id: int, angle: float) -> int:
        for i, v in enumerate(self.views):
            if v["subject_id"] == subject_id and abs(v["angle"] - angle) < 1e-6:
                return i
        raise ValidationError(f"no view for subject {subject_id} at angle {angle}")

    def load_view(self, index: int) -> dict:
        """Arrays for one view: image (3,H,W), parsing (20,H,W), labels, keypoints, camera."""
        if index in self._cache:
            return self._cache[index]
        rec = self.views[index]
        img = persist.load_image(self.root / rec["image"]).transpose(2, 0, 1)
        labels = persist.load_labels(self.root / rec["parsing"])
        item = {
            "image": np.ascontiguousarray(img),
            "labels": labels,
            "parsing": np.eye(N_LABELS, dtype=np.float32)[labels].transpose(2, 0, 1),
            "keypoints": persist.load_array(self.root / rec["keypoints"]),
            "camera": WeakPerspectiveCamera.from_dict(rec["camera"]),
            "subject_id": rec["subject_id"], "angle": rec["angle"],
        }
        self._cache[index] = item
        return item

    def subject_record(self, subject_id: int) -> dict:
        for s in self.manifest["subjects"]:
            if s["subject_id"] == subject_id:
                return s
        raise ValidationError(f"unknown subject {subject_id}")

    def subject_ids(self, split: str | None = None) -> list[int]:
        return [s["subject_id"] for s in self.manifest["subjects"] if split is None or s["split"] == split]

    def mesh(self, subject_id: int) -> TexturedMesh:
        stem = self.root / "meshes" / f"subject_{subject_id:03d}"
        return TexturedMesh(np.load(f"{stem}_vertices.npy"), np.load(f"{stem}_faces.npy"),
                            np.load(f"{stem}_colors.npy"))

    def face_labels(self, subject_id: int) -> np.ndarray:
        return np.load(self.root / "meshes" / f"subject_{subject_id:03d}_face_labels.npy")

    def vertex_labels(self, subject_id: int) -> np.ndarray:
        return np.load(self.root / "meshes" / f"subject_{subject_id:03d}_vertex_labels.npy")

    def samples(self, subject_id: int) -> dict:
        key = ("samples", subject_id)
        if key not in self._cache:
            with np.load(self.root / self.subject_record(subject_id)["samples"]) as z:
                self._cache[key] = {k: z[k] for k in z.files}
        return self._cache[key]

    def subject(self, subject_id: int) -> SyntheticSubject:
        rec = self.subject_record(subject_id)
        return generate_subject(rec["seed"], GarmentSpec.from_dict(rec["garment_spec"]), subject_id)

    def views_of(self, subject_id: int) -> list[int]:
        return [i for i, v in enumerate(self.views) if v["subject_id"] == subject_id]


def occupancy_grid_of(mesh: TexturedMesh, resolution: int) -> OccupancyGrid:
    """Ground-truth occupancy on the canonical ``[-1, 1]^3`` grid."""
    pts = OccupancyGrid.points(resolution)
    return OccupancyGrid(point_in_mesh(mesh, pts).reshape((resolution,) * 3).astype(np.float32),
                         (-1, -1, -1), (1, 1, 1))

