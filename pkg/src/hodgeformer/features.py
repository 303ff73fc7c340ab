"""Per-element input features for vertices, edges and faces, plus augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .mesh import DegenerateGeometryError, neighbor_lists, build_adjacency

VERTEX_COLUMNS = ("x", "y", "z", "nx", "ny", "nz", "cell_area")
EDGE_COLUMNS = (
    "a_x", "a_y", "a_z", "b_x", "b_y", "b_z",
    "opp0_x", "opp0_y", "opp0_z", "opp1_x", "opp1_y", "opp1_z",
    "nx", "ny", "nz",
    "len", "len_f0_a", "len_f0_b", "len_f1_a", "len_f1_b",
)
FACE_COLUMNS = ("a_x", "a_y", "a_z", "b_x", "b_y", "b_z", "c_x", "c_y", "c_z", "nx", "ny", "nz", "area")


@dataclass
class FeatureSet:
    x_v_in: np.ndarray
    x_e_in: np.ndarray
    x_f_in: np.ndarray
    diagnostics: list = field(default_factory=list)

    def get(self, kind):
        return {"v": self.x_v_in, "e": self.x_e_in, "f": self.x_f_in}[kind]


def _face_geometry(mesh):
    v = mesh.vertices
    a, b, c = (v[mesh.faces[:, k]] for k in range(3))
    cross = np.cross(b - a, c - a)
    double_area = np.linalg.norm(cross, axis=1)
    return cross, 0.5 * double_area


def _unit_rows(x):
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    ok = norm[:, 0] > 1e-300
    out = np.zeros_like(x)
    out[ok] = x[ok] / norm[ok]
    return out, ok


def vertex_normals_and_areas(mesh):
    """Area-weighted vertex normals and barycentric cell areas."""
    cross, area = _face_geometry(mesh)
    acc = np.zeros((mesh.n_v, 3))
    cell = np.zeros(mesh.n_v)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cross)
        np.add.at(cell, mesh.faces[:, k], area / 3.0)
    normals, ok = _unit_rows(acc)
    return normals, cell, ok


def extract_vertex_features(mesh, diagnostics=None):
    normals, cell, ok = vertex_normals_and_areas(mesh)
    if diagnostics is not None and not ok.all():
        bad = np.flatnonzero(~ok)
        diagnostics.append(f"{len(bad)} vertices without a normal (isolated or zero-area star): "
                           f"{bad[:10].tolist()}")
    return np.concatenate([mesh.vertices, normals, cell[:, None]], axis=1)


def extract_edge_features(mesh, diagnostics=None):
    v = mesh.vertices
    a, b = v[mesh.edges[:, 0]], v[mesh.edges[:, 1]]
    length = np.linalg.norm(b - a, axis=1)
    if mesh.n_e and length.min() <= 0:
        raise DegenerateGeometryError(f"edge {int(np.argmin(length))} has zero length")

    vnormals, _, _ = vertex_normals_and_areas(mesh)
    enormals, ok = _unit_rows(vnormals[mesh.edges[:, 0]] + vnormals[mesh.edges[:, 1]])
    if diagnostics is not None and not ok.all():
        diagnostics.append(f"{int((~ok).sum())} edges without a normal")

    opposite = np.zeros((mesh.n_e, 6))
    others = np.zeros((mesh.n_e, 4))
    ef = mesh.edge_faces
    for slot in range(2):
        face = ef[:, slot]
        has = face >= 0
        e_ids = np.flatnonzero(has)
        f_ids = face[has]
        # local position of the edge inside the face
        local = np.argmax(mesh.edge_of_face[f_ids] == e_ids[:, None], axis=1)
        opp = mesh.faces[f_ids, (local + 2) % 3]
        opposite[e_ids, 3 * slot:3 * slot + 3] = v[opp]
        for j, shift in enumerate((1, 2)):
            other = mesh.edge_of_face[f_ids, (local + shift) % 3]
            others[e_ids, 2 * slot + j] = length[other]
    return np.concatenate([a, b, opposite, enormals, length[:, None], others], axis=1)


def extract_face_features(mesh):
    cross, area = _face_geometry(mesh)
    scale = max(mesh.bbox_diagonal(), 1e-300)
    if mesh.n_f and area.min() <= 1e-14 * scale * scale:
        raise DegenerateGeometryError(f"face {int(np.argmin(area))} has zero area")
    normals = cross / (2.0 * area[:, None])
    coords = mesh.vertices[mesh.faces].reshape(-1, 9)
    return np.concatenate([coords, normals, area[:, None]], axis=1)


def extract_features(mesh):
    diagnostics = []
    return FeatureSet(
        x_v_in=extract_vertex_features(mesh, diagnostics),
        x_e_in=extract_edge_features(mesh, diagnostics),
        x_f_in=extract_face_features(mesh),
        diagnostics=diagnostics,
    )


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def augment(mesh, seed, jitter=0.1, rotate=True, neighbors=None):
    """Random rotation followed by a per-vertex slide toward one random neighbor.

    Each vertex moves by ``u * (neighbor - vertex)`` with ``u ~ U(0, jitter)``;
    isolated vertices only rotate.
    """
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    if rotate:
        v = v @ random_rotation(rng).T
    if jitter > 0:
        if neighbors is None:
            neighbors = neighbor_lists(build_adjacency(mesh).vertex_adj)
        deg = np.array([len(n) for n in neighbors])
        pick = np.floor(rng.random(mesh.n_v) * np.maximum(deg, 1)).astype(np.int64)
        u = rng.uniform(0.0, jitter, size=mesh.n_v)
        target = np.array([nb[p] if nb else i for i, (nb, p) in enumerate(zip(neighbors, pick))])
        v = v + u[:, None] * (v[target] - v)
    return mesh.with_vertices(v)


def dump_features(features, stem):
    """Write ``<stem>_{v,e,f}.csv`` with a JSON header file next to each."""
    stem = Path(stem)
    written = []
    for kind, cols in (("v", VERTEX_COLUMNS), ("e", EDGE_COLUMNS), ("f", FACE_COLUMNS)):
        x = features.get(kind)
        csv_path = stem.with_name(f"{stem.name}_{kind}.csv")
        np.savetxt(csv_path, x, delimiter=",", fmt="%.17g")
        header = {"rows": int(x.shape[0]), "cols": int(x.shape[1]), "column_names": list(cols)}
        csv_path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
        written.append(csv_path)
    return written
