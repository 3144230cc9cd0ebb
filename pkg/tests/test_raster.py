"""Orthographic rasterizer: silhouette, depth, projection map."""

import numpy as np
import pytest

from occadapt.geometry import TriMesh, make_box, make_icosphere
from occadapt.raster import RasterError, RasterInput, project, rasterize, save_pgm


def _any_hit(origin, direction, tris):
    """True if the ray intersects any triangle (Moller-Trumbore)."""
    eps = 1e-12
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - tris[:, 0]
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    return bool((ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)).any())


# ---------------------------------------------------------------------------
# project
# ---------------------------------------------------------------------------

def test_project_origin_to_center():
    u, v, z = project(np.zeros(3), 64)
    assert (u, v, z) == (32.0, 32.0, 0.5)


def test_project_box_corner():
    u, v, z = project(np.array([-0.5, -0.5, -0.5]), 64)
    assert (u, v, z) == (0.0, 0.0, 0.0)


def test_project_batched():
    pts = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [-0.25, 0.25, 0.1]])
    u, v, z = project(pts, 32)
    np.testing.assert_allclose(u, [16.0, 32.0, 8.0])
    np.testing.assert_allclose(v, [16.0, 32.0, 24.0])
    np.testing.assert_allclose(z, [0.5, 1.0, 0.6])


# ---------------------------------------------------------------------------
# rasterize
# ---------------------------------------------------------------------------

def test_cube_fills_frame_with_constant_depth():
    cube = make_box((0.0, 0.0, 0.0), (0.5, 0.5, 0.5))
    r = rasterize(cube, 64)
    assert r.mask.shape == (64, 64) and r.depth.shape == (64, 64)
    assert r.mask.sum() == 64 * 64
    # nearest face is the z = -0.5 plane, depth 0 everywhere
    np.testing.assert_allclose(r.depth, 0.0, atol=1e-12)


def test_shifted_slab_constant_depth():
    slab = make_box((0.0, 0.0, 0.1), (0.3, 0.3, 0.05))
    r = rasterize(slab, 64)
    inside = r.mask > 0
    assert inside.any()
    np.testing.assert_allclose(r.depth[inside], 0.55, atol=1e-12)
    np.testing.assert_allclose(r.depth[~inside], 0.0)


def test_sphere_silhouette_area():
    sph = make_icosphere(0.4, subdivisions=3)
    r = rasterize(sph, 256)
    frac = r.mask.sum() / 256**2
    assert frac == pytest.approx(np.pi * 0.4**2, rel=0.02)


def test_depth_positive_implies_mask():
    sph = make_icosphere(0.35, subdivisions=2)
    r = rasterize(sph, 64)
    assert np.all(r.mask[r.depth > 0] == 1.0)
    assert np.all(r.depth[r.mask == 0] == 0.0)
    assert r.depth.min() >= 0.0 and r.depth.max() <= 1.0


def test_mask_matches_center_ray_casting():
    rng = np.random.default_rng(0)
    mesh = make_icosphere(0.4, subdivisions=2)
    r = rasterize(mesh, 64)
    tris = mesh.triangles()
    idx = rng.integers(0, 64, size=(1000, 2))
    agree = 0
    for i, j in idx:
        x = (i + 0.5) / 64 - 0.5
        y = (j + 0.5) / 64 - 0.5
        hit = _any_hit(np.array([x, y, -2.0]), np.array([0.0, 0.0, 1.0]), tris)
        agree += int(hit == bool(r.mask[i, j]))
    assert agree / 1000 >= 0.995


def test_sphere_depth_matches_analytic():
    sph = make_icosphere(0.4, subdivisions=3)
    r = rasterize(sph, 128)
    for i in range(128):
        for j in range(128):
            if r.mask[i, j] == 0:
                continue
            x = (i + 0.5) / 128 - 0.5
            y = (j + 0.5) / 128 - 0.5
            rho2 = x * x + y * y
            if rho2 > 0.35**2:        # skip the rim where the facets cut corners
                continue
            z_exact = 0.5 - np.sqrt(0.4**2 - rho2)
            assert abs(r.depth[i, j] - z_exact) < 0.02


def test_project_rasterize_depth_consistency():
    # front-face surface points of an axis-aligned slab reproduce their depth
    slab = make_box((0.0, 0.0, 0.05), (0.4, 0.4, 0.2))
    r = rasterize(slab, 64)
    rng = np.random.default_rng(1)
    pts = np.column_stack([
        rng.uniform(-0.35, 0.35, 200),
        rng.uniform(-0.35, 0.35, 200),
        np.full(200, -0.15),           # nearest face of the slab
    ])
    u, v, z = project(pts, 64)
    iu = np.clip(u.astype(int), 0, 63)
    iv = np.clip(v.astype(int), 0, 63)
    np.testing.assert_allclose(r.depth[iu, iv], z, atol=1e-9)


def test_rasterize_deterministic():
    mesh = make_icosphere(0.3, subdivisions=2)
    a = rasterize(mesh, 64)
    b = rasterize(mesh, 64)
    np.testing.assert_array_equal(a.mask, b.mask)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_empty_silhouette_raises():
    far = TriMesh(np.array([[2.0, 2.0, 0.0], [2.1, 2.0, 0.0], [2.0, 2.1, 0.0]]),
                  np.array([[0, 1, 2]]))
    with pytest.raises(RasterError, match="empty silhouette"):
        rasterize(far, 64)


def test_resolution_floor():
    with pytest.raises(ValueError, match=">= 16"):
        rasterize(make_icosphere(0.3), 8)


def test_channels_stacking():
    r = rasterize(make_icosphere(0.3), 32)
    ch = r.channels()
    assert ch.shape == (2, 32, 32)
    np.testing.assert_array_equal(ch[0], r.mask)
    np.testing.assert_array_equal(ch[1], r.depth)


def test_nearest_depth_wins():
    # two parallel slabs; the nearer (smaller z) one sets the depth
    near = make_box((0.0, 0.0, -0.2), (0.3, 0.3, 0.05))
    far_ = make_box((0.0, 0.0, 0.3), (0.3, 0.3, 0.05))
    from occadapt.geometry import merge_meshes
    r = rasterize(merge_meshes([near, far_]), 64)
    inside = r.mask > 0
    np.testing.assert_allclose(r.depth[inside], 0.25, atol=1e-12)


def test_pgm_dump(tmp_path):
    r = rasterize(make_icosphere(0.3), 32)
    path = tmp_path / "mask.pgm"
    save_pgm(path, r.mask)
    text = path.read_text().split()
    assert text[0] == "P2"
    assert text[1] == "32" and text[2] == "32" and text[3] == "255"
    vals = np.array(text[4:], dtype=int)
    assert vals.size == 32 * 32
    assert set(np.unique(vals)) <= {0, 255}
