"""Shared raster, mesh and camera types plus the bilinear sampling primitive.

Conventions used throughout the package:

* images, parsing maps, keypoint fields and feature maps are ``(B, C, H, W)``
  tensors (or ``(C, H, W)`` / ``(H, W, C)`` numpy arrays at the I/O boundary);
* pixel ``(0, 0)`` is the *center* of the top-left pixel, ``x`` runs along
  columns and ``y`` along rows;
* flows and sampling coordinates are stored in pixel units, never in the
  ``[-1, 1]`` convention of ``torch.nn.functional.grid_sample``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

N_LABELS = 20

# Parsing label slots. Only the first eight are produced by the renderer; the
# remaining channels exist so maps keep the 20-label layout.
BACKGROUND = 0
HEAD = 1
TORSO_GARMENT = 2
ARMS_SKIN = 3
ARM_GARMENT = 4
LEGS_GARMENT = 5
LEGS_SKIN = 6
FEET = 7

LABEL_NAMES = {
    BACKGROUND: "background",
    HEAD: "head",
    TORSO_GARMENT: "torso-garment",
    ARMS_SKIN: "arms-skin",
    ARM_GARMENT: "arm-garment",
    LEGS_GARMENT: "legs-garment",
    LEGS_SKIN: "legs-skin",
    FEET: "feet",
}

# labels routed through the flow warp (everything else is dense-warped)
CLOTHING_LABELS = (TORSO_GARMENT, ARM_GARMENT, LEGS_GARMENT)
# labels replaced during the image-layout composite: top garment plus arms
TRANSFER_LABELS = (TORSO_GARMENT, ARM_GARMENT, ARMS_SKIN)

KEYPOINT_SIGMA = 6.0


class ValidationError(ValueError):
    """Raised when an input violates a documented contract."""


# ---------------------------------------------------------------------------
# raster helpers
# ---------------------------------------------------------------------------

def check_image(img: torch.Tensor, name: str = "image") -> torch.Tensor:
    if img.dim() != 4 or img.shape[1] != 3:
        raise ValidationError(f"{name} must be (B, 3, H, W), got {tuple(img.shape)}")
    if img.shape[2] < 8 or img.shape[3] < 8:
        raise ValidationError(f"{name} must be at least 8x8, got {tuple(img.shape[2:])}")
    if not torch.isfinite(img).all():
        raise ValidationError(f"{name} contains non-finite values")
    return img


def check_same_size(*tensors: torch.Tensor) -> None:
    sizes = {tuple(t.shape[-2:]) for t in tensors}
    if len(sizes) != 1:
        raise ValidationError(f"spatial sizes differ: {sorted(sizes)}")


def one_hot(labels, n_labels: int = N_LABELS) -> torch.Tensor:
    """Integer label map ``(B, H, W)`` or ``(H, W)`` to a one-hot float map."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    squeeze = labels.dim() == 2
    if squeeze:
        labels = labels[None]
    if labels.min() < 0 or labels.max() >= n_labels:
        raise ValidationError("label index out of range")
    out = F.one_hot(labels, n_labels).permute(0, 3, 1, 2).float()
    return out[0] if squeeze else out


def argmax_one_hot(soft: torch.Tensor) -> torch.Tensor:
    """Re-one-hot a soft label map along the channel axis."""
    return F.one_hot(soft.argmax(dim=1), soft.shape[1]).permute(0, 3, 1, 2).to(soft.dtype)


def label_mask(parsing: torch.Tensor, labels) -> torch.Tensor:
    """Binary ``(B, 1, H, W)`` mask of the pixels carrying any of ``labels``."""
    return parsing[:, list(labels)].sum(dim=1, keepdim=True).clamp(max=1.0)


def keypoint_field(joints_xy: np.ndarray, height: int, width: int,
                   sigma: float = KEYPOINT_SIGMA) -> np.ndarray:
    """Distance keypoint field ``exp(-d / sigma)`` with one channel per joint.

    ``joints_xy`` is ``(J, 2)`` in pixel coordinates; the result is
    ``(J, H, W)`` float32 in ``(0, 1]``.
    """
    joints_xy = np.asarray(joints_xy, dtype=np.float64)
    if joints_xy.ndim != 2 or joints_xy.shape[1] != 2 or len(joints_xy) < 1:
        raise ValidationError("joints must be a (J, 2) array with J >= 1")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    d = np.hypot(xs[None] - joints_xy[:, 0, None, None], ys[None] - joints_xy[:, 1, None, None])
    return np.exp(-d / sigma).astype(np.float32)


def identity_grid(height: int, width: int, batch: int = 1, dtype=torch.float32,
                  device=None) -> torch.Tensor:
    """Pixel-center coordinates ``(B, H, W, 2)`` with last axis ``(x, y)``."""
    ys = torch.arange(height, dtype=dtype, device=device)
    xs = torch.arange(width, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).expand(batch, height, width, 2)


def bilinear_sample(src: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` (B, C, H, W) at pixel coordinates ``coords`` (B, H', W', 2).

    Positions outside the raster clamp to the border. Integer coordinates
    reproduce source pixels exactly (the neighbouring tap gets weight 0).
    """
    if not torch.isfinite(coords).all():
        raise ValidationError("sampling coordinates must be finite")
    if src.numel() == 0:
        raise ValidationError("cannot sample an empty map")
    b, c, h, w = src.shape
    x = coords[..., 0].clamp(0, w - 1)
    y = coords[..., 1].clamp(0, h - 1)
    x0 = x.detach().floor()
    y0 = y.detach().floor()
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)
    out_shape = (b, c) + tuple(coords.shape[1:3])

    def tap(yy, xx):
        idx = (yy * w + xx).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(out_shape)

    top = tap(y0, x0) * (1 - fx) + tap(y0, x1) * fx
    bottom = tap(y1, x0) * (1 - fx) + tap(y1, x1) * fx
    return top * (1 - fy) + bottom * fy


def resize(x: torch.Tensor, size) -> torch.Tensor:
    """Area-downsample or bilinearly upsample to ``size`` (H, W)."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[-2:]) == size:
        return x
    if x.shape[-2] >= size[0] and x.shape[-1] >= size[1]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def to_numpy_image(img: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` or ``(1, 3, H, W)`` tensor to an ``(H, W, 3)`` array."""
    if img.dim() == 4:
        img = img[0]
    return img.detach().cpu().permute(1, 2, 0).numpy()


def to_tensor_image(arr: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` array to a ``(1, 3, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]


# ---------------------------------------------------------------------------
# geometry types
# ---------------------------------------------------------------------------

@dataclass
class TexturedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertex_colors is not None:
            self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_colors) != len(self.vertices):
                raise ValidationError("vertex_colors must match the vertex count")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValidationError("triangle index out of range")

    @property
    def triangles(self) -> np.ndarray:
        """``(M, 3, 3)`` corner positions."""
        return self.vertices[self.faces]

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        # area-weighted accumulation of unnormalized face normals
        fn = self.face_normals(normalize=False)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)

    def edge_degrees(self) -> np.ndarray:
        """Number of triangles sharing each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        if self.is_empty():
            return False
        return bool(np.all(self.edge_degrees() == 2))

    def signed_volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def transformed(self, rotation: np.ndarray) -> "TexturedMesh":
        return TexturedMesh(self.vertices @ np.asarray(rotation).T, self.faces.copy(),
                            None if self.vertex_colors is None else self.vertex_colors.copy())


def rotation_y(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# 180 degrees about x: world y-up/z-front to image y-down/z-away.
FLIP_YZ = np.diag([1.0, -1.0, -1.0])


@dataclass
class WeakPerspectiveCamera:
    scale: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    depth_offset: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not self.scale > 0:
            raise ValidationError("camera scale must be positive")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ValidationError("camera rotation must be orthonormal")

    @classmethod
    def orbit(cls, angle_deg: float, image_size: int, extent: float = 1.0,
              margin: float = 0.95) -> "WeakPerspectiveCamera":
        """Camera for a subject turned by ``angle_deg`` about the vertical axis.

        The cube ``[-extent, extent]^3`` maps onto ``margin`` of the image.
        """
        half = (image_size - 1) / 2.0
        return cls(scale=margin * half / extent, center=np.array([half, half]),
                   rotation=FLIP_YZ @ rotation_y(angle_deg))

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points ``(N, 3)`` to pixel positions ``(N, 2)`` and depths ``(N,)``."""
        p = np.asarray(points, dtype=np.float64) @ self.rotation.T
        return self.scale * p[:, :2] + self.center, p[:, 2] + self.depth_offset

    def project_torch(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        rot = torch.as_tensor(self.rotation, dtype=points.dtype, device=points.device)
        center = torch.as_tensor(self.center, dtype=points.dtype, device=points.device)
        p = points @ rot.T
        return self.scale * p[..., :2] + center, p[..., 2] + self.depth_offset

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "center": self.center.tolist(),
                "rotation": self.rotation.tolist(), "depth_offset": float(self.depth_offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "WeakPerspectiveCamera":
        return cls(scale=d["scale"], center=np.array(d["center"]),
                   rotation=np.array(d["rotation"]), depth_offset=d.get("depth_offset", 0.0))


@dataclass
class OccupancyGrid:
    """Regular scalar grid; ``values[i, j, k]`` sits at ``bbox_min + (i, j, k) * spacing``."""
    values: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.values.shape) - 1)

    @classmethod
    def points(cls, resolution: int, bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)) -> np.ndarray:
        """Grid node positions ``(R^3, 3)`` in C order."""
        axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(bbox_min, bbox_max)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)
