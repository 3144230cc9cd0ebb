"""Occupancy grid sampling, marching cubes, component filtering, rescale."""

import numpy as np
import pytest

from occadapt.geometry import (
    TriMesh,
    connected_components,
    make_box,
    make_icosphere,
    merge_meshes,
)
from occadapt.model import OccupancyModel
from occadapt.raster import rasterize
from occadapt.surface import (
    EmptySurfaceError,
    OccupancyGrid,
    lattice_points,
    marching_cubes,
    postprocess,
    sample_grid,
    sphere_occupancy_grid,
)


def small_model(**kw):
    kw.setdefault("channels", 4)
    kw.setdefault("resolution", 16)
    kw.setdefault("hidden", (8, 6))
    return OccupancyModel(**kw)


def watertight(mesh: TriMesh) -> bool:
    edges = {}
    for f in mesh.faces:
        for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(e), max(e))
            edges[key] = edges.get(key, 0) + 1
    return all(c == 2 for c in edges.values())


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ValueError, match="shape"):
        OccupancyGrid(np.zeros((4, 4, 5)), 4)
    with pytest.raises(ValueError, match="outside"):
        OccupancyGrid(np.full((4, 4, 4), 1.5), 4)


def test_grid_axis_spans_unit_box():
    g = OccupancyGrid(np.zeros((17, 17, 17)), 17)
    ax = g.axis()
    assert ax[0] == -0.5 and ax[-1] == 0.5
    assert g.spacing == pytest.approx(1.0 / 16)


def test_lattice_points_order():
    pts = lattice_points(3)
    assert pts.shape == (27, 3)
    np.testing.assert_allclose(pts[0], [-0.5, -0.5, -0.5])
    np.testing.assert_allclose(pts[1], [-0.5, -0.5, 0.0])   # z fastest
    np.testing.assert_allclose(pts[3], [-0.5, 0.0, -0.5])   # then y
    np.testing.assert_allclose(pts[-1], [0.5, 0.5, 0.5])


def test_sample_grid_constant_half_for_zero_decoder():
    model = small_model()
    for p in model.decoder_parameters():
        p.data = np.zeros_like(p.data)
    raster = rasterize(make_icosphere(0.4, subdivisions=1), 16)
    grid = sample_grid(model, raster, 16)
    np.testing.assert_allclose(grid.values, 0.5, atol=1e-15)


def test_sample_grid_matches_pointwise_predict():
    model = small_model(seed=3)
    raster = rasterize(make_icosphere(0.4, subdivisions=1), 16)
    grid = sample_grid(model, raster, 16)
    pts = lattice_points(16)
    rng = np.random.default_rng(0)
    idx = rng.choice(len(pts), size=100, replace=False)
    per_point = model.predict(raster, pts[idx]).fused.data
    np.testing.assert_array_equal(grid.values.ravel()[idx], per_point)


def test_sample_grid_resolution_floor():
    model = small_model()
    raster = rasterize(make_icosphere(0.4, subdivisions=1), 16)
    with pytest.raises(ValueError, match=">= 16"):
        sample_grid(model, raster, 8)


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

def test_sphere_area_and_volume():
    r = 0.4
    mesh = marching_cubes(sphere_occupancy_grid(r, 128))
    area = mesh.face_areas().sum()
    vol = mesh.volume()
    assert area == pytest.approx(4 * np.pi * r * r, rel=0.03)
    assert vol == pytest.approx(4 / 3 * np.pi * r**3, rel=0.02)
    assert watertight(mesh)


def test_sphere_vertices_on_surface():
    # every vertex should lie within one cell diagonal of the true sphere
    for G in (32, 64, 128):
        grid = sphere_occupancy_grid(0.35, G)
        mesh = marching_cubes(grid)
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 0.35).max() < np.sqrt(3) * grid.spacing


def test_cube_vertices_near_surface():
    # banded field for an axis-aligned cube of half extent 0.3
    for G in (32, 64):
        ax = np.linspace(-0.5, 0.5, G)
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        d = np.maximum.reduce([np.abs(gx), np.abs(gy), np.abs(gz)]) - 0.3
        band = 2.0 / (G - 1)
        grid = OccupancyGrid(np.clip(0.5 - d / band, 0, 1), G)
        mesh = marching_cubes(grid)
        dist = np.abs(np.maximum.reduce([np.abs(mesh.vertices[:, 0]),
                                         np.abs(mesh.vertices[:, 1]),
                                         np.abs(mesh.vertices[:, 2])]) - 0.3)
        assert dist.max() < np.sqrt(3) * grid.spacing
        assert mesh.volume() == pytest.approx(0.6**3, rel=0.03)


def test_constant_grid_raises():
    with pytest.raises(EmptySurfaceError, match="no iso crossings"):
        marching_cubes(OccupancyGrid(np.full((16, 16, 16), 0.2), 16))
    with pytest.raises(EmptySurfaceError):
        marching_cubes(OccupancyGrid(np.full((16, 16, 16), 0.9), 16))


def test_iso_validation():
    grid = sphere_occupancy_grid(0.3, 16)
    with pytest.raises(ValueError, match="iso"):
        marching_cubes(grid, iso=0.0)


def test_extraction_deterministic():
    grid = sphere_occupancy_grid(0.3, 32)
    a = marching_cubes(grid)
    b = marching_cubes(grid)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.faces, b.faces)


def test_outward_orientation():
    mesh = marching_cubes(sphere_occupancy_grid(0.4, 64))
    assert mesh.volume() > 0


# ---------------------------------------------------------------------------
# postprocess
# ---------------------------------------------------------------------------

def test_postprocess_single_component_keeps_geometry():
    mesh = make_icosphere(0.3, subdivisions=2)
    out = postprocess(mesh)
    assert out.n_faces == mesh.n_faces
    lo, hi = out.bounds()
    np.testing.assert_allclose(lo, -0.5, atol=1e-12)
    np.testing.assert_allclose(hi, 0.5, atol=1e-12)


def test_postprocess_removes_floater():
    sphere = make_icosphere(0.4, subdivisions=2)      # 1280 faces
    floater = TriMesh(
        np.array([[0.45, 0.45, 0.45], [0.47, 0.45, 0.45], [0.45, 0.47, 0.45],
                  [0.45, 0.45, 0.47]]),
        np.array([[0, 1, 2], [0, 3, 1], [1, 3, 2], [0, 2, 3]]))
    merged = merge_meshes([sphere, floater])
    out = postprocess(merged, min_fraction=0.05)
    assert out.n_faces == sphere.n_faces
    assert len(connected_components(out)) == 1


def test_postprocess_keeps_large_components():
    a = make_icosphere(0.2, (-0.25, 0.0, 0.0), subdivisions=2)
    b = make_icosphere(0.2, (0.25, 0.0, 0.0), subdivisions=2)
    out = postprocess(merge_meshes([a, b]), min_fraction=0.05)
    assert len(connected_components(out)) == 2


def test_postprocess_compacts_vertices():
    sphere = make_icosphere(0.4, subdivisions=2)      # 320 faces, threshold 16
    floater = make_box((0.48, 0.48, 0.48), (0.01, 0.01, 0.01))
    out = postprocess(merge_meshes([sphere, floater]))
    assert out.n_vertices == sphere.n_vertices
    assert out.faces.max() == out.n_vertices - 1


def test_postprocess_exact_unit_bbox_any_input():
    rng = np.random.default_rng(1)
    verts = rng.normal(size=(30, 3)) * np.array([0.01, 7.0, 2.0]) + 5.0
    mesh = TriMesh(verts, np.array([[i, i + 1, i + 2] for i in range(28)]))
    out = postprocess(mesh)
    lo, hi = out.bounds()
    np.testing.assert_allclose(lo, -0.5, atol=1e-9)
    np.testing.assert_allclose(hi, 0.5, atol=1e-9)


def test_postprocess_idempotent():
    mesh = merge_meshes([make_icosphere(0.3, subdivisions=2),
                         make_box((0.45, 0.45, 0.45), (0.02, 0.02, 0.02))])
    once = postprocess(mesh)
    twice = postprocess(once)
    np.testing.assert_allclose(twice.vertices, once.vertices, atol=1e-12)
    np.testing.assert_array_equal(twice.faces, once.faces)


def test_postprocess_validation():
    mesh = make_icosphere(0.3)
    with pytest.raises(ValueError, match="min_fraction"):
        postprocess(mesh, min_fraction=2.0)
    with pytest.raises(ValueError, match="empty"):
        postprocess(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 0.05)
