"""Orthographic single-view rasterizer producing the network input.

A fixed frontal camera looks along +z at the normalized mesh; the image
plane is (x, y) in [-0.5, 0.5]^2 divided into R x R pixels. The output has
two channels: a binary silhouette mask and the nearest-surface depth
(smallest z along the view ray), remapped to [0, 1], zero outside the mask.
These two channels replace an RGB image: the shapes carry no colour, and
mask plus depth is the geometry-bearing equivalent.

Grids are indexed [u, v] where u runs along x and v along y; the center of
pixel (i, j) sits at continuous coordinates (i + 0.5, j + 0.5), matching the
bilinear sampling convention used downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriMesh


class RasterError(Exception):
    """Raised when the mesh leaves no silhouette under the fixed camera."""


@dataclass
class RasterInput:
    """Two-channel view of a mesh: silhouette mask and normalized depth."""

    mask: np.ndarray      # (R, R) float64 in {0, 1}
    depth: np.ndarray     # (R, R) float64 in [0, 1], 0 outside the mask
    resolution: int

    def channels(self) -> np.ndarray:
        """(2, R, R) stacked input for the encoder."""
        return np.stack([self.mask, self.depth])


def project(points: np.ndarray, resolution: int):
    """Map points in the unit box to continuous pixel coordinates and depth.

    Returns (u, v, z) arrays: u = (p_x + 0.5) * R, v likewise from p_y, and
    z = p_z + 0.5 in [0, 1]. The origin maps to the image center (R/2, R/2)
    with depth 0.5.
    """
    p = np.asarray(points, dtype=np.float64)
    u = (p[..., 0] + 0.5) * resolution
    v = (p[..., 1] + 0.5) * resolution
    z = p[..., 2] + 0.5
    return u, v, z


def rasterize(mesh: TriMesh, resolution: int = 64) -> RasterInput:
    """Render mask and nearest-depth channels for a normalized mesh.

    A pixel belongs to the mask when its center lies inside the projection
    of some triangle; its depth is the smallest interpolated z over all
    covering triangles (the surface nearest the camera), remapped to [0, 1].
    Raises RasterError when no pixel is covered.
    """
    if resolution < 16:
        raise ValueError(f"rasterize: resolution must be >= 16, got {resolution}")
    R = resolution
    tris = mesh.triangles()
    zbuf = np.full((R, R), np.inf)
    eps = 1e-12
    for tri in tris:
        pu = (tri[:, 0] + 0.5) * R
        pv = (tri[:, 1] + 0.5) * R
        area2 = (pu[1] - pu[0]) * (pv[2] - pv[0]) - (pu[2] - pu[0]) * (pv[1] - pv[0])
        if abs(area2) < eps:
            continue                    # edge-on triangle, zero silhouette area
        i0 = max(int(np.floor(pu.min() - 0.5)), 0)
        i1 = min(int(np.ceil(pu.max() - 0.5)), R - 1)
        j0 = max(int(np.floor(pv.min() - 0.5)), 0)
        j1 = min(int(np.ceil(pv.max() - 0.5)), R - 1)
        if i0 > i1 or j0 > j1:
            continue
        cu = np.arange(i0, i1 + 1) + 0.5
        cv = np.arange(j0, j1 + 1) + 0.5
        gu, gv = np.meshgrid(cu, cv, indexing="ij")
        w0 = ((pu[1] - gu) * (pv[2] - gv) - (pu[2] - gu) * (pv[1] - gv)) / area2
        w1 = ((pu[2] - gu) * (pv[0] - gv) - (pu[0] - gu) * (pv[2] - gv)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        if not inside.any():
            continue
        z = w0 * tri[0, 2] + w1 * tri[1, 2] + w2 * tri[2, 2]
        patch = zbuf[i0:i1 + 1, j0:j1 + 1]
        np.minimum(patch, np.where(inside, z, np.inf), out=patch)
    mask = np.isfinite(zbuf).astype(np.float64)
    if mask.sum() == 0:
        raise RasterError("empty silhouette: mesh projects outside the image")
    depth = np.where(mask > 0, zbuf + 0.5, 0.0)
    return RasterInput(mask, depth, R)


def save_pgm(path, grid: np.ndarray):
    """Write a [0,1] grid as an ascii PGM image (for debugging)."""
    g = np.asarray(grid, dtype=np.float64)
    img = np.clip(np.rint(g * 255.0), 0, 255).astype(int)
    # image rows scan top to bottom: v decreasing, u along the row
    rows = img.T[::-1]
    with open(path, "w") as fh:
        fh.write(f"P2\n{img.shape[0]} {img.shape[1]}\n255\n")
        for row in rows:
            fh.write(" ".join(str(x) for x in row) + "\n")
