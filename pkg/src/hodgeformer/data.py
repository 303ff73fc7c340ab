"""Datasets, manifests, per-mesh caches and batch collation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import mesh as meshlib
from .features import augment, extract_features
from .layers import face_average_matrix, neighbor_mean_matrix, pooling_matrix
from .mesh import IncidenceOperators, build_adjacency, build_incidence, neighbor_lists
from .sparsity import bfs_prefixes, build_pattern, concat_patterns, pattern_sizes

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    path: str = None
    generator: dict = None
    label: int = None
    label_file: str = None
    split: str = "train"

    def source(self):
        return self.path if self.path is not None else json.dumps(self.generator, sort_keys=True)


@dataclass
class DatasetManifest:
    entries: list
    root: Path = Path(".")

    @classmethod
    def read(cls, path):
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            unknown = set(rec) - {"path", "generator", "label", "label_file", "split"}
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            if (rec.get("path") is None) == (rec.get("generator") is None):
                raise ManifestError(f"{path}:{lineno}: exactly one of path/generator is required")
            if (rec.get("label") is None) == (rec.get("label_file") is None):
                raise ManifestError(f"{path}:{lineno}: exactly one of label/label_file is required")
            entries.append(ManifestEntry(**rec))
        return cls(entries, path.parent)

    def write(self, path):
        path = Path(path)
        with path.open("w") as fh:
            for e in self.entries:
                rec = {k: v for k, v in vars(e).items() if v is not None}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    def split(self, tag):
        return [e for e in self.entries if e.split == tag]


def load_entry(entry, root="."):
    """Return ``(normalized mesh, label)`` for a manifest entry."""
    if entry.path is not None:
        p = Path(entry.path)
        mesh = meshlib.load_mesh(p if p.is_absolute() else Path(root) / p)
    else:
        g = entry.generator
        mesh = meshlib.generate_shape(g["kind"], int(g["resolution"]), int(g.get("seed", 0)),
                                      float(g.get("deform", 0.0)))
    mesh = meshlib.normalize_mesh(mesh)
    if entry.label_file is not None:
        p = Path(entry.label_file)
        labels = np.loadtxt(p if p.is_absolute() else Path(root) / p, dtype=np.int64, ndmin=1)
        if len(labels) != mesh.n_f:
            raise ManifestError(f"{entry.label_file}: {len(labels)} labels for {mesh.n_f} faces")
        return mesh, labels
    return mesh, int(entry.label)


# ---------------------------------------------------------------- synthetic data

CLASS_KINDS = ("sphere", "cube", "torus", "cylinder")


def synthetic_entries(classes=3, per_class=10, seed=0, split="train", resolution=(60, 100),
                      deform=(0.05, 0.15)):
    """Generator specs for the shape classification set (class i is ``CLASS_KINDS[i]``)."""
    if not 1 <= classes <= len(CLASS_KINDS):
        raise ValueError(f"classes must be in [1, {len(CLASS_KINDS)}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x53594E]))
    out = []
    for c in range(classes):
        for _ in range(per_class):
            gen = {"kind": CLASS_KINDS[c],
                   "resolution": int(rng.integers(resolution[0], resolution[1] + 1)),
                   "seed": int(rng.integers(0, 2**31 - 1)),
                   "deform": round(float(rng.uniform(*deform)), 6)}
            out.append(ManifestEntry(generator=gen, label=c, split=split))
    return out


def octant_labels(mesh):
    """Per-face label from the octant of the face centroid direction."""
    c = mesh.vertices[mesh.faces].mean(axis=1)
    return ((c[:, 0] > 0).astype(np.int64) + 2 * (c[:, 1] > 0) + 4 * (c[:, 2] > 0))


def nearest_face_labels(original, labels, mutated):
    """Transfer per-face labels via the nearest original face centroid."""
    from scipy.spatial import cKDTree

    src = original.vertices[original.faces].mean(axis=1)
    dst = mutated.vertices[mutated.faces].mean(axis=1)
    _, idx = cKDTree(src).query(dst)
    return np.asarray(labels)[idx]


# ---------------------------------------------------------------- per-mesh preparation

class MeshStatics:
    """Connectivity-derived data that survives augmentation."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.ops = build_incidence(mesh)
        adj = build_adjacency(mesh)
        self.adjacency = adj
        self.neighbors = {k: neighbor_lists(adj.get(k)) for k in ("v", "e", "f")}
        self.agg = {k: neighbor_mean_matrix(adj.get(k)) for k in ("v", "e", "f")}
        self.counts = {"v": mesh.n_v, "e": mesh.n_e, "f": mesh.n_f}
        self._prefixes = {}

    def prefixes(self, kind, local_count):
        key = (kind, local_count)
        if key not in self._prefixes:
            self._prefixes[key] = bfs_prefixes(self.neighbors[kind], local_count)
        return self._prefixes[key]

    def pattern(self, kind, s_override, seed):
        n = self.counts[kind]
        _, local, _ = pattern_sizes(n, s_override)
        return build_pattern(self.neighbors[kind], n, s_override, seed, self.prefixes(kind, local))


@dataclass
class MeshSample:
    statics: MeshStatics
    mesh: meshlib.Mesh
    features: dict
    patterns: dict
    label: object = None


def prepare_sample(statics, label=None, seed=0, augmented=False, jitter=0.1, kinds=("v", "e"),
                   s_override=None):
    """Features and sparsity patterns for one pass over one mesh."""
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [int(seed)])
    aug_seed, pat_seed = ss.spawn(2)
    mesh = statics.mesh
    if augmented:
        mesh = augment(mesh, np.random.default_rng(aug_seed), jitter=jitter,
                       neighbors=statics.neighbors["v"])
    fs = extract_features(mesh)
    feats = {"v": fs.x_v_in, "e": fs.x_e_in, "f": fs.x_f_in}
    rng = np.random.default_rng(pat_seed)
    s_override = s_override or {}
    patterns = {k: statics.pattern(k, s_override.get(k), rng) for k in kinds}
    return MeshSample(statics, mesh, feats, patterns, label)


@dataclass
class Batch:
    """Disjoint union of meshes; every operator is block diagonal."""

    features: dict
    agg: dict
    ops: IncidenceOperators
    patterns: dict
    offsets: dict
    faces: np.ndarray
    edge_of_face: np.ndarray
    labels: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self):
        return len(self.offsets["v"]) - 1

    def pooling(self, kind):
        key = ("pool", kind)
        if key not in self._cache:
            self._cache[key] = pooling_matrix(self.offsets[kind])
        return self._cache[key]

    def face_average(self, kind):
        key = ("favg", kind)
        if key not in self._cache:
            if kind == "v":
                m = face_average_matrix(self.faces, self.offsets["v"][-1])
            elif kind == "e":
                m = face_average_matrix(self.edge_of_face, self.offsets["e"][-1])
            else:
                m = sparse.identity(self.offsets["f"][-1], format="csr")
            self._cache[key] = m
        return self._cache[key]


def collate(samples, dtype=np.float32):
    offsets = {}
    for k in ("v", "e", "f"):
        offsets[k] = np.concatenate([[0], np.cumsum([s.statics.counts[k] for s in samples])]).astype(np.int64)
    feats = {k: np.concatenate([s.features[k] for s in samples]).astype(dtype) for k in ("v", "e", "f")}
    agg = {k: sparse.block_diag([s.statics.agg[k] for s in samples], format="csr") for k in ("v", "e", "f")}
    d0 = sparse.block_diag([s.statics.ops.d0 for s in samples], format="csr")
    d1 = sparse.block_diag([s.statics.ops.d1 for s in samples], format="csr")
    ops = IncidenceOperators(d0, d1, d0.T.tocsr(), d1.T.tocsr())
    kinds = samples[0].patterns.keys()
    patterns = {k: concat_patterns([s.patterns[k] for s in samples], offsets[k][:-1]) for k in kinds}
    faces = np.concatenate([s.mesh.faces + offsets["v"][i] for i, s in enumerate(samples)])
    eof = np.concatenate([s.mesh.edge_of_face + offsets["e"][i] for i, s in enumerate(samples)])
    labels = [s.label for s in samples]
    if labels and all(np.ndim(l) == 0 and l is not None for l in labels):
        labels = np.asarray(labels, dtype=np.int64)
    elif labels and all(l is not None for l in labels):
        labels = np.concatenate([np.asarray(l, dtype=np.int64) for l in labels])
    else:
        labels = None
    return Batch(feats, agg, ops, patterns, offsets, faces, eof, labels)
