import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from garment_transfer.core import (ARM_GARMENT, ARMS_SKIN, BACKGROUND, HEAD, LEGS_GARMENT, TORSO_GARMENT,
                                   ValidationError)
from garment_transfer.synthdata import (GarmentSpec, RegionTexture, SyntheticDataset, ambient_lighting,
                                        build_dataset, dataset_budget, enumerate_pairs, generate_subject,
                                        random_lighting, render_view, sample_pair, sh_shading)


@pytest.fixture(scope="module")
def subject0():
    return generate_subject(0)


def _edge_degrees(faces):
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def _irradiance_quadrature(normals, lighting, n=40000):
    # E(n) / pi = (1/pi) * integral of L(w) max(0, n.w) dw, with L expanded in the real SH basis
    w = _fibonacci_sphere(n)
    x, y, z = w.T
    Y = np.stack([0.282095 * np.ones_like(x), 0.488603 * y, 0.488603 * z, 0.488603 * x,
                  1.092548 * x * y, 1.092548 * y * z, 0.315392 * (3 * z * z - 1),
                  1.092548 * x * z, 0.546274 * (x * x - y * y)], 1)
    L = Y @ lighting
    cos = np.clip(normals @ w.T, 0, None)
    return (cos * L).sum(1) * (4 * np.pi / n) / np.pi


def test_generate_subject_deterministic():
    a, b = generate_subject(5), generate_subject(5)
    assert np.array_equal(a.body_mesh.vertices, b.body_mesh.vertices)
    assert np.array_equal(a.body_mesh.faces, b.body_mesh.faces)
    assert np.array_equal(a.body_mesh.vertex_colors, b.body_mesh.vertex_colors)
    assert np.array_equal(a.face_labels, b.face_labels)


@settings(max_examples=4, deadline=None)
@given(st.integers(0, 10_000))
def test_any_seed_is_watertight(seed):
    s = generate_subject(seed)
    assert np.all(_edge_degrees(s.body_mesh.faces) == 2)


def test_long_sleeves_put_garment_on_arms(subject0):
    spec = GarmentSpec(RegionTexture((0.8, 0.1, 0.1)), RegionTexture((0.1, 0.1, 0.8)), long_sleeves=True)
    s = generate_subject(0, spec)
    arm_faces = s.face_labels == ARM_GARMENT
    assert arm_faces.sum() > 0
    # every arm-garment face sits on an arm capsule, above the wrist
    cent = s.body_mesh.triangles[arm_faces].mean(1)
    arm_parts = [p for p in s.parts if p.name.startswith("arm")]
    d = np.min(np.stack([p.sdf(cent) for p in arm_parts], 1), 1)
    assert np.all(d < 0.02)
    short = generate_subject(0, GarmentSpec(spec.top, spec.bottom, long_sleeves=False))
    assert (short.face_labels == ARM_GARMENT).sum() < arm_faces.sum()
    assert (short.face_labels == ARMS_SKIN).sum() > (s.face_labels == ARMS_SKIN).sum()


def test_region_sets_are_disjoint(subject0):
    labels = subject0.face_labels
    assert labels.shape == (len(subject0.body_mesh.faces),)
    assert set(np.unique(labels)) <= {HEAD, TORSO_GARMENT, ARMS_SKIN, ARM_GARMENT, LEGS_GARMENT, 6, 7}


def test_render_periodic_in_angle(subject0):
    a = render_view(subject0, 0.0, image_size=64)
    b = render_view(subject0, 360.0 - 1e-7, image_size=64)
    assert np.abs(a.image - b.image).max() < 2 / 255


def test_render_rejects_bad_angle(subject0):
    with pytest.raises(ValidationError):
        render_view(subject0, 360.0)


def test_ambient_white_is_flat(subject0):
    white = RegionTexture((1.0, 1.0, 1.0))
    s = subject0.with_textures({k: white for k in subject0.textures})
    v = render_view(s, 30.0, ambient_lighting(0.8), image_size=48)
    fg = v.labels != BACKGROUND
    assert fg.sum() > 100
    assert np.all(v.image[fg] == v.image[fg][0])


def test_half_turn_swaps_left_right(subject0):
    from garment_transfer.synthdata import JOINT_NAMES
    r, l = JOINT_NAMES.index("r_shoulder"), JOINT_NAMES.index("l_shoulder")
    for angle, sign in ((0.0, 1), (180.0, -1)):
        v = render_view(subject0, angle, image_size=64)
        xy, _ = v.camera.project(subject0.joints)
        assert np.sign(xy[l, 0] - xy[r, 0]) == sign
        # the keypoint field peaks at the projected joint
        k = v.keypoints[l]
        iy, ix = np.unravel_index(k.argmax(), k.shape)
        assert abs(ix - xy[l, 0]) <= 0.5 and abs(iy - xy[l, 1]) <= 0.5


def test_pixel_colours_follow_lambertian_sh(subject0):
    rng = np.random.default_rng(3)
    light = random_lighting(rng)
    v = render_view(subject0, 45.0, light, image_size=64)
    fg = np.argwhere(v.face_ids >= 0)
    pick = fg[rng.choice(len(fg), 200, replace=False)]
    fid = v.face_ids[pick[:, 0], pick[:, 1]]
    hit = v.hit_points[pick[:, 0], pick[:, 1]]
    albedo = subject0.albedo(hit, subject0.face_labels[fid])
    # world normal to view frame: view_from_world = FLIP_YZ-free form (x right, y up, z to viewer)
    n_world = subject0.body_mesh.face_normals()[fid]
    R = np.diag([1.0, -1.0, -1.0]) @ v.camera.rotation
    shade = _irradiance_quadrature(n_world @ R.T, light)
    expected = albedo * shade[:, None]
    got = v.image[pick[:, 0], pick[:, 1]]
    assert np.abs(got - np.clip(expected, 0, 1)).max() <= 1 / 255 + 2e-3


def test_sh_shading_matches_quadrature():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    light = rng.normal(size=9) * 0.3
    assert np.allclose(sh_shading(n, light), _irradiance_quadrature(n, light), atol=2e-3)


def test_vertices_project_inside_silhouette(tiny_dataset):
    ds = tiny_dataset
    for idx in range(0, len(ds), 3):
        item = ds.load_view(idx)
        mesh = ds.mesh(item["subject_id"])
        xy, _ = item["camera"].project(mesh.vertices)
        sil = ndimage.binary_dilation(item["labels"] != BACKGROUND, structure=np.ones((3, 3)))
        px = np.clip(np.round(xy).astype(int), 0, sil.shape[0] - 1)
        assert sil[px[:, 1], px[:, 0]].mean() == 1.0


def test_manifest_counts_and_split(tmp_path):
    m = build_dataset(tmp_path, n_train_subjects=1, n_test_subjects=1, views_per_subject=4, image_size=32,
                      n_uniform=50, n_surface=50, n_color=50, n_heldout=50)
    assert len(m["views"]) == 8
    split_of = {s["subject_id"]: s["split"] for s in m["subjects"]}
    assert all(v["split"] == split_of[v["subject_id"]] for v in m["views"])
    assert sorted(split_of.values()) == ["test", "train"]
    for sub in ("images", "parsing", "keypoints", "meshes"):
        assert (tmp_path / sub).is_dir()


def _tree_digest(root: Path):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_bit_identical(tmp_path):
    kw = dict(n_train_subjects=1, n_test_subjects=0, views_per_subject=3, image_size=32,
              n_uniform=60, n_surface=60, n_color=60, n_heldout=60, seed=11)
    build_dataset(tmp_path / "a", **kw)
    build_dataset(tmp_path / "b", **kw)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_full_scale_budget():
    # 83 training subjects x 90 views, 80 pairs each
    b = dataset_budget(83, 90, 80)
    assert b["images"] == 7470
    assert b["pairs"] == 83 * 80


def test_pairs_same_subject_distinct_angles(tiny_dataset):
    views = tiny_dataset.manifest["views"]
    pairs = enumerate_pairs(tiny_dataset.manifest, "train")
    n_train = len(tiny_dataset.subject_ids("train"))
    assert len(pairs) == n_train * 4 * 3
    for a, b in pairs:
        assert views[a]["subject_id"] == views[b]["subject_id"]
        assert views[a]["angle"] != views[b]["angle"]
    capped = enumerate_pairs(tiny_dataset.manifest, "train", pairs_per_subject=5)
    assert len(capped) == n_train * 5


def test_sample_pair_draws(tiny_dataset):
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        r, s = sample_pair(tiny_dataset.manifest, rng)
        assert r["subject_id"] == s["subject_id"] and r["angle"] != s["angle"]
    seq = lambda: [tuple(v["angle"] for v in sample_pair(tiny_dataset.manifest, np.random.default_rng(4)))
                   for _ in range(3)]
    assert seq() == seq()


def test_sample_pair_single_subject():
    manifest = {"views": [{"subject_id": 3, "angle": a, "split": "train"} for a in (0.0, 90.0)]}
    r, s = sample_pair(manifest, np.random.default_rng(0))
    assert r["subject_id"] == s["subject_id"] == 3


def test_dataset_view_arrays(tiny_dataset):
    item = tiny_dataset.load_view(0)
    assert item["image"].shape == (3, 32, 32)
    assert item["parsing"].shape[1:] == (32, 32)
    assert np.array_equal(item["parsing"].argmax(0), item["labels"])
    assert isinstance(tiny_dataset, SyntheticDataset)
