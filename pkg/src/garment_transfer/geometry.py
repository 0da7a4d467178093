"""Mesh queries: ray-parity inside/outside tests, surface sampling, distances."""
from __future__ import annotations

import numpy as np

from .core import OccupancyGrid, TexturedMesh, ValidationError

# Fixed, deliberately non axis-aligned ray directions for the parity vote.
RAY_DIRECTIONS = np.array([
    [0.0123457, 0.0271828, 1.0],
    [1.0, 0.0314159, -0.0141421],
    [-0.0173205, 1.0, 0.0223607],
])
RAY_DIRECTIONS /= np.linalg.norm(RAY_DIRECTIONS, axis=1, keepdims=True)

_PAIR_CHUNK = 2_000_000


def _ray_parity(tri: np.ndarray, points: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Parity of crossings along ``+direction`` for every point.

    Triangles are projected onto the plane orthogonal to the ray and binned
    on a uniform 2D grid so each point is only tested against nearby faces.
    """
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(direction, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    basis = np.stack([e1, e2], axis=1)

    t2 = tri @ basis                       # (M, 3, 2)
    td = tri @ direction                   # (M, 3)
    p2 = points @ basis                    # (N, 2)
    pd = points @ direction                # (N,)

    lo = t2.min(axis=1)
    hi = t2.max(axis=1)
    origin = lo.min(axis=0)
    extent = np.maximum(hi.max(axis=0) - origin, 1e-12)
    size = np.median(hi - lo) * 2.0 + 1e-12
    ncell = np.clip(np.ceil(extent / size).astype(int), 1, 512)
    cell = extent / ncell

    c0 = np.clip(np.floor((lo - origin) / cell).astype(int), 0, ncell - 1)
    c1 = np.clip(np.floor((hi - origin) / cell).astype(int), 0, ncell - 1)
    span = c1 - c0 + 1
    per_tri = span[:, 0] * span[:, 1]
    tri_idx = np.repeat(np.arange(len(tri)), per_tri)
    local = np.arange(len(tri_idx)) - np.repeat(np.cumsum(per_tri) - per_tri, per_tri)
    cx = c0[tri_idx, 0] + local % span[tri_idx, 0]
    cy = c0[tri_idx, 1] + local // span[tri_idx, 0]
    tri_cell = cx * ncell[1] + cy

    pc = np.floor((p2 - origin) / cell).astype(int)
    valid = np.all((pc >= 0) & (pc < ncell), axis=1)
    pcell = np.where(valid, pc[:, 0] * ncell[1] + pc[:, 1], -1)
    order = np.argsort(pcell, kind="stable")
    sorted_cells = pcell[order]
    ncells_total = ncell[0] * ncell[1]
    starts = np.searchsorted(sorted_cells, np.arange(ncells_total), side="left")
    ends = np.searchsorted(sorted_cells, np.arange(ncells_total), side="right")
    counts = (ends - starts)[tri_cell]

    hits = np.zeros(len(points), dtype=np.int64)
    keep = counts > 0
    tri_idx, tri_cell, counts = tri_idx[keep], tri_cell[keep], counts[keep]
    bounds = np.concatenate([[0], np.cumsum(counts)])
    # process the (triangle, point) candidates in bounded chunks
    step_edges = np.searchsorted(bounds, np.arange(0, bounds[-1] + _PAIR_CHUNK, _PAIR_CHUNK))
    for a, b in zip(step_edges[:-1], step_edges[1:]):
        if a >= b:
            continue
        ti, tc, cnt = tri_idx[a:b], tri_cell[a:b], counts[a:b]
        pt_tri = np.repeat(ti, cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        pt = order[np.repeat(starts[tc], cnt) + offs]

        v = t2[pt_tri]
        q = p2[pt]
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        r = q - v[:, 0]
        den = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        ok = np.abs(den) > 1e-300
        den = np.where(ok, den, 1.0)
        u = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / den
        w = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / den
        inside = ok & (u >= 0) & (w >= 0) & (u + w <= 1)
        depth = (1 - u - w) * td[pt_tri, 0] + u * td[pt_tri, 1] + w * td[pt_tri, 2]
        crossing = inside & (depth > pd[pt])
        hits += np.bincount(pt[crossing], minlength=len(points))
    return (hits % 2).astype(bool)


def point_in_mesh(mesh: TexturedMesh, points: np.ndarray, n_rays: int = 3) -> np.ndarray:
    """Inside test for a watertight mesh by majority vote over ray parities."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if mesh.is_empty():
        return np.zeros(len(points), dtype=bool)
    tri = mesh.triangles
    votes = sum(_ray_parity(tri, points, d).astype(int) for d in RAY_DIRECTIONS[:n_rays])
    return votes * 2 > n_rays


def require_watertight(mesh: TexturedMesh) -> None:
    if not mesh.is_watertight():
        raise ValidationError("mesh is not watertight; inside/outside parity is undefined")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_surface(mesh: TexturedMesh, n: int, rng: np.random.Generator):
    """Area-weighted surface samples: (points, face index, barycentric weights)."""
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    pts = np.einsum("ni,nij->nj", bary, mesh.triangles[face])
    return pts, face, bary


def sample_occupancy_points(mesh: TexturedMesh, n_uniform: int, n_surface: int, sigma: float,
                            rng: np.random.Generator, bbox_min=(-1.0, -1.0, -1.0),
                            bbox_max=(1.0, 1.0, 1.0)):
    """Uniform volume samples plus Gaussian-perturbed surface samples, labelled by parity.

    Returns ``(points (N, 3), labels (N,) float in {0, 1})``.
    """
    require_watertight(mesh)
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    uniform = lo + rng.random((n_uniform, 3)) * (hi - lo)
    surf, _, _ = sample_surface(mesh, n_surface, rng)
    surf = surf + rng.normal(scale=sigma, size=surf.shape)
    pts = np.concatenate([uniform, surf])
    return pts, point_in_mesh(mesh, pts).astype(np.float64)


def sample_color_points(mesh: TexturedMesh, n: int, sigma_normal: float, rng: np.random.Generator):
    """Surface samples pushed along the interpolated normal by ``N(0, sigma^2)``.

    Targets are the barycentric interpolation of vertex colours. Returns
    ``(points (n, 3), rgb (n, 3))``.
    """
    if mesh.vertex_colors is None:
        raise ValidationError("mesh has no vertex colours")
    pts, face, bary = sample_surface(mesh, n, rng)
    corners = mesh.faces[face]
    normals = np.einsum("ni,nij->nj", bary, mesh.vertex_normals()[corners])
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    offset = rng.normal(scale=sigma_normal, size=(n, 1)) if sigma_normal > 0 else np.zeros((n, 1))
    rgb = np.einsum("ni,nij->nj", bary, mesh.vertex_colors[corners])
    return pts + offset * normals, rgb


def bbox_diagonal(mesh: TexturedMesh) -> float:
    return float(np.linalg.norm(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)))


# ---------------------------------------------------------------------------
# distances and comparisons
# ---------------------------------------------------------------------------

def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles ``(a, b, c)`` to ``p``; all arrays ``(K, 3)``.

    Region classification after Ericson, *Real-Time Collision Detection* 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        den = va + vb + vc
        out = a + ab * (vb / den)[:, None] + ac * (vc / den)[:, None]
        # edges
        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out[m] = (a + t_ab[:, None] * ab)[m]
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out[m] = (a + t_ac[:, None] * ac)[m]
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        out[m] = (b + t_bc[:, None] * (c - b))[m]
    # vertices
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    m = (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    m = (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    return out


def point_mesh_distance(mesh: TexturedMesh, points: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Unsigned distance from each point to the mesh (brute force over faces)."""
    points = np.atleast_2d(points)
    tri = mesh.triangles
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        k = len(p)
        pp = np.repeat(p, len(tri), axis=0)
        a = np.tile(tri[:, 0], (k, 1))
        b = np.tile(tri[:, 1], (k, 1))
        c = np.tile(tri[:, 2], (k, 1))
        q = closest_point_on_triangles(pp, a, b, c)
        out[s:s + k] = np.linalg.norm(pp - q, axis=1).reshape(k, -1).min(axis=1)
    return out


def voxelize(mesh: TexturedMesh, resolution: int, bbox_min=(-1.0, -1.0, -1.0),
             bbox_max=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Boolean occupancy at voxel centres of a ``resolution^3`` grid."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    half = (hi - lo) / resolution / 2
    pts = OccupancyGrid.points(resolution, lo + half, hi - half)
    return point_in_mesh(mesh, pts).reshape((resolution,) * 3)


def voxel_iou(a: TexturedMesh, b: TexturedMesh, resolution: int = 48, **bbox) -> float:
    va = voxelize(a, resolution, **bbox)
    vb = voxelize(b, resolution, **bbox)
    union = np.logical_or(va, vb).sum()
    return float(np.logical_and(va, vb).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# analytic test solids
# ---------------------------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TexturedMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
             [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TexturedMesh(np.array(verts) * radius + np.asarray(center), np.array(faces))


def box_mesh(bbox_min, bbox_max) -> TexturedMesh:
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    verts = lo + v * (hi - lo)
    # outward-facing quads split into triangles; index = 4x + 2y + z
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return TexturedMesh(verts, np.array(faces))
