"""Lossless raster, field, mesh and volume I/O."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import OccupancyGrid, TexturedMesh, ValidationError


def _ensure_parent(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create directory for {path}: {exc}") from exc
    return path


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap ``[0, 1]`` values to the 8-bit lattice so PNG storage is lossless."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def save_image(path, img: np.ndarray) -> None:
    """``(H, W, 3)`` float image in ``[0, 1]`` to an 8-bit PNG."""
    path = _ensure_parent(path)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0))


def save_labels(path, labels: np.ndarray) -> None:
    path = _ensure_parent(path)
    PILImage.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def load_labels(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.uint8).copy()


def save_array(path, arr: np.ndarray) -> None:
    np.save(_ensure_parent(path), arr, allow_pickle=False)


def load_array(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def write_obj(path, mesh: TexturedMesh) -> None:
    """ASCII OBJ; vertex colours ride on the ``v x y z r g b`` extension."""
    path = _ensure_parent(path)
    lines = []
    if mesh.vertex_colors is not None:
        for (x, y, z), (r, g, b) in zip(mesh.vertices, mesh.vertex_colors):
            lines.append(f"v {x:.9g} {y:.9g} {z:.9g} {r:.6g} {g:.6g} {b:.6g}")
    else:
        lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")


def read_obj(path) -> TexturedMesh:
    verts, colors, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(v) for v in parts[4:7]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TexturedMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3),
                        np.array(colors) if colors and len(colors) == len(verts) else None)


def write_ply(path, mesh: TexturedMesh) -> None:
    """Binary little-endian PLY with float positions and uchar red/green/blue."""
    path = _ensure_parent(path)
    has_color = mesh.vertex_colors is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices",
               "end_header"]
    vdtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vdtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    v = np.zeros(len(mesh.vertices), dtype=vdtype)
    v["x"], v["y"], v["z"] = mesh.vertices.T.astype(np.float32)
    if has_color:
        rgb = np.round(np.clip(mesh.vertex_colors, 0, 1) * 255).astype(np.uint8)
        v["red"], v["green"], v["blue"] = rgb.T
    f = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    f["n"] = 3
    f["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(v.tobytes())
        fh.write(f.tobytes())


def read_ply(path) -> TexturedMesh:
    """Reader for the layout written by :func:`write_ply`."""
    data = Path(path).read_bytes()
    if not data.startswith(b"ply\n"):
        raise ValidationError(f"{path}: missing PLY magic")
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    props = []
    for line in header:
        p = line.split()
        if p[:2] == ["element", "vertex"]:
            n_vert = int(p[2])
        elif p[:2] == ["element", "face"]:
            n_face = int(p[2])
        elif p[0] == "property" and p[1] != "list" and n_face == 0:
            props.append(p[2])
    has_color = "red" in props
    vdtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vdtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    v = np.frombuffer(data, dtype=vdtype, count=n_vert, offset=end)
    off = end + v.nbytes
    f = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=n_face, offset=off)
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = (np.stack([v["red"], v["green"], v["blue"]], axis=1) / 255.0) if has_color else None
    return TexturedMesh(verts, f["idx"].astype(np.int64), colors)


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------

def save_occupancy_grid(path, grid: OccupancyGrid) -> None:
    """Raw C-order volume ``<path>.raw`` plus a JSON text header ``<path>.json``."""
    path = _ensure_parent(path)
    values = np.ascontiguousarray(grid.values, dtype=np.float32)
    raw = path.with_suffix(".raw")
    raw.write_bytes(values.tobytes())
    header = {"dims": list(values.shape), "dtype": "float32", "order": "C",
              "bbox_min": grid.bbox_min.tolist(), "bbox_max": grid.bbox_max.tolist(),
              "data": raw.name}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))


def load_occupancy_grid(path) -> OccupancyGrid:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    values = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=header["dtype"])
    return OccupancyGrid(values.reshape(header["dims"]), header["bbox_min"], header["bbox_max"])


def ply_element_counts(path) -> dict:
    """Element counts declared in a PLY header (format conformance checks)."""
    with open(path, "rb") as fh:
        if fh.readline() != b"ply\n":
            raise ValidationError(f"{path}: missing PLY magic")
        counts = {}
        for raw in fh:
            line = raw.decode("ascii").strip()
            if line == "end_header":
                break
            p = line.split()
            if p[0] == "element":
                counts[p[1]] = int(p[2])
    return counts

