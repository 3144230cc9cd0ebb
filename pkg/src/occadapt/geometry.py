"""Triangle meshes: IO, normalization, inside/outside tests, point sampling.

Meshes live in a normalized frame where the axis-aligned bounding box is
centered at the origin and fits inside the unit box [-0.5, 0.5]^3 (uniform
scale, so proportions are preserved). The inside test is the generalized
winding number thresholded at 0.5, which tolerates multi-component and
slightly imperfect surfaces.

The synthetic families encode a topology shift with shared content: "biped"
solids (a torso ellipsoid over two leg cylinders) play the labeled source
domain; "pedestal" solids put the same torso on a single rectangular base,
no legs, for the unlabeled target domain.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

UNIT_BOX_MIN = -0.5
UNIT_BOX_MAX = 0.5


class MeshError(Exception):
    """Raised for unreadable, empty or malformed mesh input."""


@dataclass
class TriMesh:
    """Indexed triangle surface: (V,3) float64 vertices, (F,3) int64 faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangles(self) -> np.ndarray:
        """(F,3,3) corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def volume(self) -> float:
        """Signed volume by the divergence theorem (sum of origin tetrahedra)."""
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy())


@dataclass
class PointSet:
    """Sampled query points; labels carried only for the source domain."""

    positions: np.ndarray               # (n, 3) in the normalized frame
    labels: np.ndarray | None = None    # (n,) in {0,1}, None for target points

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if len(self.labels) != len(self.positions):
                raise ValueError("labels and positions disagree in length")

    def __len__(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------------------
# io
# ---------------------------------------------------------------------------

def _clean_faces(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Drop faces with repeated indices or (numerically) zero area."""
    if len(faces) == 0:
        return faces
    distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    faces = faces[distinct]
    t = vertices[faces]
    area2 = np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)
    scale = max(float(np.abs(vertices).max()), 1.0)
    return faces[area2 > 1e-14 * scale * scale]


def normalize_mesh(mesh: TriMesh) -> TriMesh:
    """Center the bounding box at the origin and scale uniformly into the unit box."""
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2.0
    extent = float((hi - lo).max())
    scale = 1.0 / extent if extent > 0 else 1.0
    return TriMesh((mesh.vertices - center) * scale, mesh.faces)


def unit_box_rescale(mesh: TriMesh) -> TriMesh:
    """Per-axis rescale so the bounding box is exactly [-0.5, 0.5]^3."""
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2.0
    extent = hi - lo
    scale = np.where(extent > 0, 1.0 / np.where(extent > 0, extent, 1.0), 1.0)
    return TriMesh((mesh.vertices - center) * scale, mesh.faces)


def _triangulate(idx: list[int]) -> list[list[int]]:
    if len(idx) == 3:
        return [idx]
    if len(idx) == 4:
        return [[idx[0], idx[1], idx[2]], [idx[0], idx[2], idx[3]]]
    raise MeshError(f"face with {len(idx)} vertices (only triangles and quads supported)")


def _parse_obj(lines) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for ln, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"line {ln}: malformed vertex")
            verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            faces.extend(_triangulate(idx))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ply(lines) -> tuple[np.ndarray, np.ndarray]:
    it = iter(lines)
    if next(it, "").strip() != "ply":
        raise MeshError("not a PLY file")
    n_vert = n_face = 0
    fmt = None
    elements = []                       # (name, count) in declaration order
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2])))
            if parts[1] == "vertex":
                n_vert = int(parts[2])
            elif parts[1] == "face":
                n_face = int(parts[2])
        elif parts[0] == "end_header":
            break
    if fmt != "ascii":
        raise MeshError(f"only ascii PLY supported, got format {fmt!r}")
    verts, faces = [], []
    for name, count in elements:
        for _ in range(count):
            row = next(it, None)
            if row is None:
                raise MeshError("truncated PLY body")
            vals = row.split()
            if name == "vertex":
                verts.append([float(vals[0]), float(vals[1]), float(vals[2])])
            elif name == "face":
                k = int(vals[0])
                faces.extend(_triangulate([int(v) for v in vals[1:1 + k]]))
    if len(verts) != n_vert:
        raise MeshError("PLY vertex count mismatch")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path, normalize: bool = True) -> TriMesh:
    """Read an OBJ or ascii PLY file, clean degenerate faces, normalize.

    Quads are split into two triangles. Raises MeshError with a reason for
    unreadable files, bad indices or meshes that are empty after cleanup.
    """
    path = os.fspath(path)
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise MeshError(f"cannot read {path}: {e}") from e
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        verts, faces = _parse_obj(lines)
    elif ext == ".ply":
        verts, faces = _parse_ply(lines)
    else:
        raise MeshError(f"unsupported mesh format {ext!r} (OBJ or ascii PLY)")
    if len(verts) == 0 or len(faces) == 0:
        raise MeshError(f"{path}: empty mesh")
    if faces.min() < 0 or faces.max() >= len(verts):
        raise MeshError(f"{path}: face index out of range")
    faces = _clean_faces(verts, faces)
    if len(faces) == 0:
        raise MeshError(f"{path}: no non-degenerate faces left after cleanup")
    mesh = TriMesh(verts, faces)
    return normalize_mesh(mesh) if normalize else mesh


def save_obj(path, mesh: TriMesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def save_ply(path, mesh: TriMesh):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {mesh.n_faces}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write("%.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for f in mesh.faces:
            fh.write("3 %d %d %d\n" % (f[0], f[1], f[2]))


def save_mesh(path, mesh: TriMesh):
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".obj":
        save_obj(path, mesh)
    elif ext == ".ply":
        save_ply(path, mesh)
    else:
        raise MeshError(f"unsupported mesh format {ext!r}")


# ---------------------------------------------------------------------------
# inside / outside
# ---------------------------------------------------------------------------

def winding_number(mesh: TriMesh, points: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Generalized winding number of each point (van Oosterom-Strackee solid angles)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles()
    out = np.empty(len(pts), dtype=np.float64)
    for lo in range(0, len(pts), chunk):
        p = pts[lo:lo + chunk]
        a = tris[None, :, 0] - p[:, None]          # (n, F, 3)
        b = tris[None, :, 1] - p[:, None]
        c = tris[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        det = np.einsum("nfi,nfi->nf", a, np.cross(b, c))
        denom = (la * lb * lc + np.einsum("nfi,nfi->nf", a, b) * lc
                 + np.einsum("nfi,nfi->nf", b, c) * la
                 + np.einsum("nfi,nfi->nf", c, a) * lb)
        omega = 2.0 * np.arctan2(det, denom)
        out[lo:lo + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
    return out


def occupancy(mesh: TriMesh, points) -> np.ndarray:
    """1 where the generalized winding number is >= 0.5, else 0."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    w = winding_number(mesh, pts.reshape(-1, 3))
    occ = (w >= 0.5).astype(np.float64)
    return occ[0] if single else occ


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """n area-weighted uniform samples on the surface."""
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    fidx = rng.choice(len(areas), size=n, p=probs)
    t = mesh.triangles()[fidx]
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return t[:, 0] * w0[:, None] + t[:, 1] * w1[:, None] + t[:, 2] * w2[:, None]


def sample_points(mesh: TriMesh, n: int, sigma_s: float = 0.05,
                  uniform_ratio: float = 1.0 / 16.0, seed=0,
                  labeled: bool = False) -> PointSet:
    """Near-surface plus uniform query points, clipped to the unit box.

    ceil(n * uniform_ratio) points are uniform in [-0.5, 0.5]^3; the rest are
    surface samples jittered by isotropic Gaussian noise of std sigma_s.
    Labels (inside/outside from the winding-number test) are attached only
    when labeled=True, i.e. for source-domain sampling.
    """
    if n <= 0:
        raise ValueError(f"sample_points: n must be positive, got {n}")
    if not 0.0 <= uniform_ratio <= 1.0:
        raise ValueError(f"sample_points: uniform_ratio {uniform_ratio} outside [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_uni = int(np.ceil(n * uniform_ratio))
    n_surf = n - n_uni
    parts = []
    if n_uni:
        parts.append(rng.uniform(UNIT_BOX_MIN, UNIT_BOX_MAX, size=(n_uni, 3)))
    if n_surf:
        surf = sample_surface(mesh, n_surf, rng)
        surf = surf + rng.normal(0.0, sigma_s, size=surf.shape)
        parts.append(np.clip(surf, UNIT_BOX_MIN, UNIT_BOX_MAX))
    pos = np.concatenate(parts, axis=0)
    labels = occupancy(mesh, pos) if labeled else None
    return PointSet(pos, labels)


# ---------------------------------------------------------------------------
# primitive solids (each one a closed, outward-oriented component)
# ---------------------------------------------------------------------------

def make_box(center, half_extents) -> TriMesh:
    cx, cy, cz = center
    hx, hy, hz = half_extents
    v = np.array([[sx, sy, sz] for sx in (-hx, hx) for sy in (-hy, hy) for sz in (-hz, hz)])
    v += np.array([cx, cy, cz])
    # index bit layout: 4*x + 2*y + z
    f = np.array([
        [0, 1, 3], [0, 3, 2],          # -x
        [4, 6, 7], [4, 7, 5],          # +x
        [0, 4, 5], [0, 5, 1],          # -y
        [2, 3, 7], [2, 7, 6],          # +y
        [0, 2, 6], [0, 6, 4],          # -z
        [1, 5, 7], [1, 7, 3],          # +z
    ])
    return TriMesh(v, f)


def make_icosphere(radius: float = 0.5, center=(0.0, 0.0, 0.0), subdivisions: int = 2) -> TriMesh:
    """Subdivided icosahedron with vertices on the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriMesh(verts * radius + np.asarray(center, dtype=np.float64), faces)


def make_ellipsoid(semi_axes, center=(0.0, 0.0, 0.0), subdivisions: int = 2) -> TriMesh:
    sphere = make_icosphere(1.0, (0.0, 0.0, 0.0), subdivisions)
    v = sphere.vertices * np.asarray(semi_axes, dtype=np.float64)
    return TriMesh(v + np.asarray(center, dtype=np.float64), sphere.faces)


def make_cylinder_y(radius: float, y0: float, y1: float, center_xz=(0.0, 0.0),
                    segments: int = 24) -> TriMesh:
    """Closed cylinder with axis along y from y0 to y1."""
    cx, cz = center_xz
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([cx + radius * np.cos(ang), np.zeros(segments), cz + radius * np.sin(ang)], axis=1)
    bot = ring + np.array([0.0, y0, 0.0])
    top = ring + np.array([0.0, y1, 0.0])
    verts = np.concatenate([bot, top, [[cx, y0, cz]], [[cx, y1, cz]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        # with x = cos, z = sin the angle advances clockwise seen from +y,
        # so outward-facing sides run j -> i
        faces += [[j, i, segments + i], [j, segments + i, segments + j]]
        faces += [[cb, i, j]]                       # bottom cap faces -y
        faces += [[ct, segments + j, segments + i]]  # top cap faces +y
    return TriMesh(verts, np.array(faces, dtype=np.int64))


def merge_meshes(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


# ---------------------------------------------------------------------------
# synthetic families
# ---------------------------------------------------------------------------

def make_biped(rng: np.random.Generator) -> TriMesh:
    """Torso ellipsoid over two leg cylinders; z-symmetric, parts disjoint."""
    torso = _torso_radii(rng)
    leg_r = rng.uniform(0.06, 0.085)
    leg_x = rng.uniform(max(0.09, leg_r + 0.005), 0.14)
    gap = 0.012

    leg_y0 = -0.5
    leg_y1 = rng.uniform(-0.08, -0.02)
    torso_cy = leg_y1 + gap + torso[1]

    parts = [
        make_ellipsoid(torso, (0.0, torso_cy, 0.0)),
        make_cylinder_y(leg_r, leg_y0, leg_y1, (-leg_x, 0.0)),
        make_cylinder_y(leg_r, leg_y0, leg_y1, (leg_x, 0.0)),
    ]
    return normalize_mesh(merge_meshes(parts))


def _torso_radii(rng: np.random.Generator) -> tuple:
    """Shared torso proportions: both families draw from the same ranges."""
    return (rng.uniform(0.15, 0.21), rng.uniform(0.17, 0.22),
            rng.uniform(0.12, 0.17))


def make_pedestal(rng: np.random.Generator) -> TriMesh:
    """The same torso ellipsoid atop one rectangular pedestal, no legs."""
    torso = _torso_radii(rng)
    ped_hx = rng.uniform(0.13, 0.20)
    ped_hz = rng.uniform(0.10, 0.15)
    gap = 0.012

    ped_top = rng.uniform(-0.08, -0.02)
    ped_hy = (ped_top + 0.5) / 2.0
    torso_cy = ped_top + gap + torso[1]

    parts = [
        make_ellipsoid(torso, (0.0, torso_cy, 0.0)),
        make_box((0.0, -0.5 + ped_hy, 0.0), (ped_hx, ped_hy, ped_hz)),
    ]
    return normalize_mesh(merge_meshes(parts))


def make_synthetic_dataset(family: str, count: int, seed: int = 0) -> list[TriMesh]:
    """Generate `count` normalized meshes from the named family.

    family "source" gives biped solids, "target" gives pedestal solids. The
    i-th mesh depends only on (family, seed, i), so datasets are reproducible.
    """
    if count <= 0:
        raise ValueError(f"make_synthetic_dataset: count must be positive, got {count}")
    makers = {"source": (make_biped, 1), "target": (make_pedestal, 2)}
    if family not in makers:
        raise ValueError(f"unknown family {family!r} (expected 'source' or 'target')")
    maker, tag = makers[family]
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((tag, seed, i)))
        out.append(maker(rng))
    return out


def connected_components(mesh: TriMesh) -> list[np.ndarray]:
    """Face index arrays of vertex-connected components, largest first."""
    parent = np.arange(mesh.n_vertices)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b, c in mesh.faces:
        ra, rb, rc = find(a), find(b), find(c)
        parent[ra] = rc
        parent[rb] = rc
    roots = np.array([find(f[0]) for f in mesh.faces])
    comps = [np.flatnonzero(roots == r) for r in np.unique(roots)]
    comps.sort(key=len, reverse=True)
    return comps
