"""Triangle meshes, incidence operators, adjacency, synthetic shapes and mutations."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder")
MIN_VERTICES = 50
MAX_VERTICES = 20_000


class MeshError(ValueError):
    """Base class for mesh related failures."""


class MeshParseError(MeshError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnsupportedTopologyError(MeshError):
    pass


class MeshValidationError(MeshError):
    pass


class DegenerateGeometryError(MeshError):
    pass


class EmptyMeshError(MeshError):
    pass


def _readonly(a):
    a.flags.writeable = False
    return a


class Mesh:
    """Indexed triangle mesh with a canonical edge list.

    Edges are stored once as ``(i, j)`` with ``i < j`` and sorted
    lexicographically. ``edge_of_face[f]`` lists the edges ``(a,b), (b,c),
    (c,a)`` of face ``(a, b, c)`` and ``edge_sign[f]`` is ``+1`` where the face
    traversal agrees with the canonical edge direction.

    Instances are treated as immutable; all arrays are read-only.
    """

    def __init__(self, vertices, faces, validate=True):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if validate:
            _check_faces(f, len(v))
        self.vertices = _readonly(v)
        self.faces = _readonly(f)

        directed = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1)  # (n_f, 3, 2)
        lo = directed.min(axis=2)
        hi = directed.max(axis=2)
        keys = np.stack([lo.ravel(), hi.ravel()], axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        self.edges = _readonly(edges.reshape(-1, 2).astype(np.int64))
        self.edge_of_face = _readonly(inverse.reshape(-1, 3).astype(np.int64))
        self.edge_sign = _readonly(np.where(directed[:, :, 0] < directed[:, :, 1], 1, -1).astype(np.int8))

        counts = np.bincount(self.edge_of_face.ravel(), minlength=len(self.edges))
        if validate and len(counts) and counts.max() > 2:
            bad = int(np.argmax(counts))
            raise MeshValidationError(
                f"non-manifold edge {tuple(self.edges[bad])} shared by {counts[bad]} faces")
        self.edge_face_count = _readonly(counts)

    @property
    def n_v(self):
        return len(self.vertices)

    @property
    def n_e(self):
        return len(self.edges)

    @property
    def n_f(self):
        return len(self.faces)

    @property
    def euler_characteristic(self):
        return self.n_v - self.n_e + self.n_f

    @property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_face_count == 1)

    @cached_property
    def edge_faces(self):
        """(n_e, 2) incident face ids sorted ascending; ``-1`` pads boundary edges."""
        out = np.full((self.n_e, 2), -1, dtype=np.int64)
        order = np.argsort(self.edge_of_face.ravel(), kind="stable")
        face_ids = order // 3
        e_sorted = self.edge_of_face.ravel()[order]
        first = np.ones(len(e_sorted), dtype=bool)
        first[1:] = e_sorted[1:] != e_sorted[:-1]
        out[e_sorted[first], 0] = face_ids[first]
        out[e_sorted[~first], 1] = face_ids[~first]
        return _readonly(out)

    def with_vertices(self, vertices):
        return Mesh(vertices, self.faces, validate=False)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))

    def __repr__(self):
        return f"Mesh(n_v={self.n_v}, n_e={self.n_e}, n_f={self.n_f})"


def _check_faces(f, n_v):
    if f.size and (f.min() < 0 or f.max() >= n_v):
        bad = int(np.flatnonzero((f < 0).any(1) | (f >= n_v).any(1))[0])
        raise MeshValidationError(f"face {bad} references a vertex outside [0, {n_v})")
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    if not distinct.all():
        bad = int(np.flatnonzero(~distinct)[0])
        raise MeshValidationError(f"face {bad} repeats a vertex: {f[bad].tolist()}")


# ---------------------------------------------------------------- file I/O

def load_mesh(path, format=None):
    """Read an OBJ or OFF triangle mesh; the format defaults to the suffix."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).upper()
    text = path.read_text()
    if fmt == "OBJ":
        return parse_obj(text, path)
    if fmt == "OFF":
        return parse_off(text, path)
    raise MeshParseError(f"unknown mesh format {fmt!r}", path=path)


def parse_obj(text, path=None):
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            try:
                vertices.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshParseError(f"bad vertex record {raw!r}", lineno, path) from None
            if len(vertices[-1]) != 3:
                raise MeshParseError("vertex needs 3 coordinates", lineno, path)
        elif tok[0] == "f":
            if len(tok) != 4:
                raise UnsupportedTopologyError(
                    f"{path or '<obj>'}:{lineno}: face with {len(tok) - 1} vertices; only triangles are supported")
            idx = []
            for t in tok[1:]:
                try:
                    k = int(t.split("/")[0])
                except ValueError:
                    raise MeshParseError(f"bad face index {t!r}", lineno, path) from None
                if k == 0:
                    raise MeshParseError("OBJ indices are 1-based; got 0", lineno, path)
                idx.append(k - 1 if k > 0 else len(vertices) + k)
            faces.append(idx)
    if not vertices:
        raise MeshParseError("no vertices", path=path)
    return Mesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))


def parse_off(text, path=None):
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    if not lines or not lines[0][1].startswith("OFF"):
        raise MeshParseError("missing OFF header", lines[0][0] if lines else 1, path)
    head = lines[0][1][3:].split()
    pos = 1
    if not head:
        if len(lines) < 2:
            raise MeshParseError("missing counts line", lines[0][0], path)
        head = lines[1][1].split()
        pos = 2
    try:
        n_v, n_f = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        raise MeshParseError("bad counts line", lines[pos - 1][0], path) from None
    if len(lines) < pos + n_v + n_f:
        raise MeshParseError(f"expected {n_v} vertices and {n_f} faces, file is truncated",
                             lines[-1][0], path)
    vertices = np.empty((n_v, 3))
    for k in range(n_v):
        lineno, line = lines[pos + k]
        try:
            vertices[k] = [float(t) for t in line.split()[:3]]
        except ValueError:
            raise MeshParseError(f"bad vertex line {line!r}", lineno, path) from None
    faces = np.empty((n_f, 3), dtype=np.int64)
    pos += n_v
    for k in range(n_f):
        lineno, line = lines[pos + k]
        tok = line.split()
        try:
            count = int(tok[0])
            ids = [int(t) for t in tok[1:1 + count]]
        except (ValueError, IndexError):
            raise MeshParseError(f"bad face line {line!r}", lineno, path) from None
        if count != 3:
            raise UnsupportedTopologyError(
                f"{path or '<off>'}:{lineno}: face with {count} vertices; only triangles are supported")
        if len(ids) != 3:
            raise MeshParseError("face line is truncated", lineno, path)
        faces[k] = ids
    return Mesh(vertices, faces)


def save_off(mesh, path):
    path = Path(path)
    with path.open("w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_v} {mesh.n_f} {mesh.n_e}\n")
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces:
            fh.write(f"3 {a} {b} {c}\n")
    return path


# ---------------------------------------------------------------- operators

@dataclass(frozen=True)
class IncidenceOperators:
    """Signed incidence matrices ``d0`` (n_e x n_v) and ``d1`` (n_f x n_e)."""

    d0: sparse.csr_matrix
    d1: sparse.csr_matrix
    d0T: sparse.csr_matrix = field(repr=False)
    d1T: sparse.csr_matrix = field(repr=False)

    def get(self, name):
        return {"d0": self.d0, "d1": self.d1, "d0T": self.d0T, "d1T": self.d1T}[name]


def build_incidence(mesh):
    n_v, n_e, n_f = mesh.n_v, mesh.n_e, mesh.n_f
    rows = np.repeat(np.arange(n_e), 2)
    cols = mesh.edges.ravel()
    vals = np.tile(np.array([-1, 1], dtype=np.int8), n_e)
    d0 = sparse.csr_matrix((vals, (rows, cols)), shape=(n_e, n_v), dtype=np.int8)
    d1 = sparse.csr_matrix(
        (mesh.edge_sign.ravel(), (np.repeat(np.arange(n_f), 3), mesh.edge_of_face.ravel())),
        shape=(n_f, n_e), dtype=np.int8)
    d0.sort_indices()
    d1.sort_indices()
    return IncidenceOperators(d0, d1, d0.T.tocsr(), d1.T.tocsr())


@dataclass(frozen=True)
class AdjacencyStructures:
    """Symmetric, loop-free adjacency matrices per element kind (CSR, sorted)."""

    vertex_adj: sparse.csr_matrix
    edge_adj: sparse.csr_matrix
    face_adj: sparse.csr_matrix

    def get(self, kind):
        return {"v": self.vertex_adj, "e": self.edge_adj, "f": self.face_adj}[kind]


def _binary_offdiag(m):
    m = sparse.csr_matrix(m, dtype=np.int64)
    m.setdiag(0)
    m.eliminate_zeros()
    m.data[:] = 1
    m = m.astype(np.int8)
    m.sort_indices()
    return m


def build_adjacency(mesh):
    n_v, n_e, n_f = mesh.n_v, mesh.n_e, mesh.n_f
    inc = sparse.csr_matrix(
        (np.ones(2 * n_e, dtype=np.int64), (np.repeat(np.arange(n_e), 2), mesh.edges.ravel())),
        shape=(n_e, n_v))
    fe = sparse.csr_matrix(
        (np.ones(3 * n_f, dtype=np.int64), (np.repeat(np.arange(n_f), 3), mesh.edge_of_face.ravel())),
        shape=(n_f, n_e))
    return AdjacencyStructures(
        vertex_adj=_binary_offdiag(inc.T @ inc),
        edge_adj=_binary_offdiag(inc @ inc.T),
        face_adj=_binary_offdiag(fe @ fe.T),
    )


def neighbor_lists(adj):
    adj = sparse.csr_matrix(adj)
    adj.sort_indices()
    return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].tolist() for i in range(adj.shape[0])]


# ---------------------------------------------------------------- normalization

def normalize_mesh(mesh):
    """Center vertices at their centroid and scale to the unit sphere."""
    v = mesh.vertices
    if len(v) == 0:
        raise EmptyMeshError("mesh has no vertices")
    centered = v - v.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    scale = np.abs(v).max()
    if radius <= 1e-12 * max(scale, 1.0):
        raise DegenerateGeometryError("all vertices coincide")
    out = centered / radius
    out -= out.mean(axis=0)
    return mesh.with_vertices(out)


# ---------------------------------------------------------------- synthetic shapes

def _orient_outward(vertices, faces, centers):
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    normal = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normal, (a + b + c) / 3 - centers) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _fibonacci_sphere(n):
    from scipy.spatial import ConvexHull

    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    theta = math.pi * (3 - math.sqrt(5)) * np.arange(n)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    faces = ConvexHull(pts).simplices.astype(np.int64)
    faces = faces[np.lexsort(faces.T[::-1])]
    return pts, _orient_outward(pts, faces, np.zeros((1, 3)))


def _grid_faces(idx, wrap_u, wrap_v):
    """Split the quads of an index grid ``idx[u, v]`` into triangle pairs."""
    nu, nv = idx.shape
    faces = []
    for u in range(nu if wrap_u else nu - 1):
        for v in range(nv if wrap_v else nv - 1):
            a = idx[u, v]
            b = idx[(u + 1) % nu, v]
            c = idx[(u + 1) % nu, (v + 1) % nv]
            d = idx[u, (v + 1) % nv]
            faces.append((a, b, c))
            faces.append((a, c, d))
    return np.array(faces, dtype=np.int64)


def _cube(m):
    lattice = {}
    verts = []

    def vid(p):
        if p not in lattice:
            lattice[p] = len(verts)
            verts.append(p)
        return lattice[p]

    faces = []
    for axis in range(3):
        for side in (0, m):
            idx = np.empty((m + 1, m + 1), dtype=np.int64)
            for s in range(m + 1):
                for t in range(m + 1):
                    p = [0, 0, 0]
                    p[axis] = side
                    p[(axis + 1) % 3] = s
                    p[(axis + 2) % 3] = t
                    idx[s, t] = vid(tuple(p))
            faces.append(_grid_faces(idx, False, False))
    pts = np.array(verts, dtype=np.float64) * (2.0 / m) - 1.0
    faces = np.concatenate(faces)
    return pts, _orient_outward(pts, faces, np.zeros((1, 3)))


def _torus(a, b, major=1.0, minor=0.4):
    theta = 2 * math.pi * np.arange(a) / a
    phi = 2 * math.pi * np.arange(b) / b
    T, P = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([(major + minor * np.cos(P)) * np.cos(T),
                    (major + minor * np.cos(P)) * np.sin(T),
                    minor * np.sin(P)], axis=-1).reshape(-1, 3)
    faces = _grid_faces(np.arange(a * b).reshape(a, b), True, True)
    cen = pts[faces].mean(axis=1)
    ang = np.arctan2(cen[:, 1], cen[:, 0])
    tube = np.stack([major * np.cos(ang), major * np.sin(ang), np.zeros_like(ang)], axis=1)
    return pts, _orient_outward(pts, faces, tube)


def _cylinder(a, b):
    theta = 2 * math.pi * np.arange(a) / a
    z = np.linspace(-1.0, 1.0, b)
    T, Z = np.meshgrid(theta, z, indexing="ij")
    side = np.stack([np.cos(T), np.sin(T), Z], axis=-1).reshape(-1, 3)
    pts = np.concatenate([side, [[0, 0, -1.0], [0, 0, 1.0]]])
    idx = np.arange(a * b).reshape(a, b)
    faces = [_grid_faces(idx, True, False)]
    bottom, top = a * b, a * b + 1
    fan = []
    for u in range(a):
        w = (u + 1) % a
        fan.append((bottom, idx[w, 0], idx[u, 0]))
        fan.append((top, idx[u, b - 1], idx[w, b - 1]))
    faces.append(np.array(fan, dtype=np.int64))
    faces = np.concatenate(faces)
    # side faces point away from the axis, cap faces away from the origin
    cen = pts[faces].mean(axis=1)
    ref = cen * [0.0, 0.0, 1.0]
    ref[np.abs(cen[:, 2]) > 1 - 1e-9] = 0.0
    return pts, _orient_outward(pts, faces, ref)


def shape_grid(kind, resolution):
    """Grid parameters used by :func:`generate_shape` for a target vertex count."""
    if kind == "sphere":
        return (resolution,)
    if kind == "cube":
        return (max(3, round(math.sqrt((resolution - 2) / 6))),)
    if kind == "torus":
        b = max(5, round(math.sqrt(resolution / 2)))
        return (2 * b, b)
    if kind == "cylinder":
        a = max(8, round(math.sqrt(2 * resolution)))
        return (a, max(3, round((resolution - 2) / a)))
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def smooth_field(points, rng, terms=4, frequency=2.0):
    """Random smooth scalar field with values in [-1, 1]."""
    omega = rng.normal(scale=frequency, size=(terms, 3))
    phase = rng.uniform(0, 2 * math.pi, size=terms)
    amp = rng.uniform(0.5, 1.0, size=terms)
    return np.sin(points @ omega.T + phase) @ amp / amp.sum()


def generate_shape(kind, resolution, seed=0, deform=0.0):
    """Closed orientable mesh of ``kind`` with roughly ``resolution`` vertices.

    The vertices are displaced radially by a seeded smooth field whose
    magnitude never exceeds ``deform``.
    """
    if not MIN_VERTICES <= resolution <= MAX_VERTICES:
        raise ValueError(f"resolution {resolution} outside [{MIN_VERTICES}, {MAX_VERTICES}]")
    grid = shape_grid(kind, resolution)
    builder = {"sphere": _fibonacci_sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder}[kind]
    pts, faces = builder(*grid)
    if deform:
        rng = np.random.default_rng(seed)
        radial = pts / np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1e-12)
        pts = pts + deform * smooth_field(pts, rng)[:, None] * radial
    return Mesh(pts, faces)


# ---------------------------------------------------------------- mutations

@dataclass(frozen=True)
class Mutation:
    """A robustness mutation: ``gaussian_noise``, ``face_removal`` or ``patch_removal``."""

    kind: str
    param: float
    k_range: tuple = (8, 15)

    @classmethod
    def parse(cls, text):
        """Parse ``kind[:param]``, e.g. ``face_removal:0.1``."""
        kind, _, value = text.partition(":")
        defaults = {"gaussian_noise": 0.01, "face_removal": 0.1, "patch_removal": 0.005}
        if kind not in defaults:
            raise ValueError(f"unknown mutation {kind!r}; expected one of {sorted(defaults)}")
        return cls(kind, float(value) if value else defaults[kind])

    def label(self):
        if self.kind == "gaussian_noise":
            return f"Gaussian Noise (lambda={self.param:.3f})"
        if self.kind == "face_removal":
            return f"Face Removal (p={self.param:.2f})"
        return f"Patch Removal (p={self.param:.3f})"


def apply_mutation(mesh, mutation, seed):
    """Return ``(mutated_mesh, removed_face_ids)``; vertex indices are preserved."""
    rng = np.random.default_rng(seed)
    kind, p = mutation.kind, mutation.param
    if kind == "gaussian_noise":
        if not 0 <= p <= 0.05:
            raise ValueError(f"noise level {p} outside [0, 0.05]")
        sigma = p * mesh.bbox_diagonal()
        noise = rng.normal(scale=sigma, size=mesh.vertices.shape) if sigma > 0 else 0.0
        return mesh.with_vertices(mesh.vertices + noise), np.zeros(0, dtype=np.int64)
    if not 0 <= p <= 0.25:
        raise ValueError(f"probability {p} outside [0, 0.25]")
    if kind == "face_removal":
        removed = np.flatnonzero(rng.random(mesh.n_f) < p)
    elif kind == "patch_removal":
        lo, hi = mutation.k_range
        seeds = np.flatnonzero(rng.random(mesh.n_f) < p)
        nbrs = neighbor_lists(build_adjacency(mesh).face_adj)
        gone = set()
        for s in seeds:
            k = int(rng.integers(lo, hi + 1))
            gone.update(bfs_order(nbrs, int(s), k))
        removed = np.array(sorted(gone), dtype=np.int64)
    else:
        raise ValueError(f"unknown mutation {kind!r}")
    keep = np.ones(mesh.n_f, dtype=bool)
    keep[removed] = False
    if not keep.any():
        raise EmptyMeshError("mutation removed every face")
    return Mesh(mesh.vertices, mesh.faces[keep]), removed


def mutate(mesh, mutation, seed):
    if isinstance(mutation, str):
        mutation = Mutation.parse(mutation)
    return apply_mutation(mesh, mutation, seed)[0]


def bfs_order(neighbors, start, limit):
    """Breadth-first visit order from ``start`` (FIFO, ascending neighbors), at most ``limit`` nodes."""
    seen = {start}
    out = [start]
    queue = deque([start])
    while queue and len(out) < limit:
        node = queue.popleft()
        for nb in neighbors[node]:
            if nb not in seen:
                seen.add(nb)
                out.append(nb)
                queue.append(nb)
                if len(out) >= limit:
                    break

    return out


def bipyramid(n_ring=8, height=1.0):
    """Closed bipyramid over an ``n_ring``-gon: ``n_ring + 2`` vertices."""
    t = 2 * math.pi * np.arange(n_ring) / n_ring
    ring = np.stack([np.cos(t), np.sin(t), np.zeros(n_ring)], axis=1)
    pts = np.concatenate([ring, [[0, 0, height], [0, 0, -height]]])
    top, bot = n_ring, n_ring + 1
    faces = []
    for i in range(n_ring):
        j = (i + 1) % n_ring
        faces.append((i, j, top))
        faces.append((j, i, bot))
    return Mesh(pts, faces)


def icosphere(level=0):
    """Unit icosphere after ``level`` rounds of 4-way subdivision."""
    p = (1 + math.sqrt(5)) / 2
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                cache[key] = len(verts)
                verts.append(m / np.linalg.norm(m))
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(verts), faces)
