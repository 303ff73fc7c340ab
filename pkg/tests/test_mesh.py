import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hodgeformer.mesh import (
    SHAPE_KINDS,
    DegenerateGeometryError,
    EmptyMeshError,
    Mesh,
    MeshParseError,
    MeshValidationError,
    Mutation,
    UnsupportedTopologyError,
    apply_mutation,
    bfs_order,
    bipyramid,
    build_adjacency,
    build_incidence,
    generate_shape,
    icosphere,
    load_mesh,
    neighbor_lists,
    normalize_mesh,
    parse_obj,
    parse_off,
    save_off,
)

TET_OFF = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 1 2 3
3 0 3 2
"""


def assert_consistent_orientation(mesh):
    # every interior edge is traversed once in each direction
    ef = mesh.edge_faces
    interior = ef[:, 1] >= 0
    signs = np.zeros((mesh.n_e, 2), dtype=int)
    for slot in range(2):
        f = ef[interior, slot]
        e = np.flatnonzero(interior)
        local = np.argmax(mesh.edge_of_face[f] == e[:, None], axis=1)
        signs[interior, slot] = mesh.edge_sign[f, local]
    assert np.all(signs[interior, 0] == -signs[interior, 1])


def signed_volume(mesh):
    a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    return np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0


# ---------------------------------------------------------------- parsing

def test_off_tetrahedron():
    m = parse_off(TET_OFF)
    assert (m.n_v, m.n_e, m.n_f) == (4, 6, 4)
    assert m.euler_characteristic == 2


def test_off_counts_on_header_line_and_comments():
    text = "OFF 3 1 3\n# a comment\n0 0 0\n1 0 0\n0 1 0 # trailing\n3 0 1 2\n"
    m = parse_off(text)
    assert (m.n_v, m.n_f) == (3, 1)


def test_obj_single_triangle():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert (m.n_v, m.n_e, m.n_f) == (3, 3, 1)


def test_obj_slash_and_negative_indices():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2//1 -1\n")
    assert m.faces.tolist() == [[0, 1, 2]]


def test_obj_quad_rejected():
    with pytest.raises(UnsupportedTopologyError):
        parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")


def test_parse_errors_carry_line_numbers():
    with pytest.raises(MeshParseError) as info:
        parse_off("OFF\n3 1 0\n0 0 0\n1 0 zero\n0 1 0\n3 0 1 2\n")
    assert info.value.line == 4
    with pytest.raises(MeshParseError):
        parse_off("OFF\n3 1 0\n0 0 0\n")
    with pytest.raises(MeshParseError):
        parse_off("PLY\n")


def test_out_of_range_and_repeated_indices():
    with pytest.raises(MeshValidationError):
        Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])
    with pytest.raises(MeshValidationError):
        Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])


def test_non_manifold_edge_rejected():
    v = np.eye(3).tolist() + [[0, 0, 0], [1, 1, 1]]
    with pytest.raises(MeshValidationError):
        Mesh(v, [[0, 1, 2], [0, 1, 3], [0, 1, 4]])


def test_off_round_trip(tmp_path):
    m = generate_shape("torus", 80, seed=3, deform=0.1)
    p = save_off(m, tmp_path / "t.off")
    back = load_mesh(p)
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_mesh_arrays_are_read_only(tetrahedron):
    with pytest.raises(ValueError):
        tetrahedron.vertices[0, 0] = 5.0


# ---------------------------------------------------------------- operators

def test_single_triangle_operators():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert m.edges.tolist() == [[0, 1], [0, 2], [1, 2]]
    ops = build_incidence(m)
    assert ops.d0.toarray().tolist() == [[-1, 1, 0], [-1, 0, 1], [0, -1, 1]]
    assert ops.d1.toarray().tolist() == [[1, -1, 1]]


def test_tetrahedron_operator_shapes(tetrahedron):
    ops = build_incidence(tetrahedron)
    assert ops.d0.shape == (6, 4) and ops.d1.shape == (4, 6)
    assert np.all(np.abs(ops.d1.toarray()).sum(axis=1) == 3)
    assert np.array_equal(ops.d0T.toarray(), ops.d0.toarray().T)
    assert np.array_equal(ops.d1T.toarray(), ops.d1.toarray().T)


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(SHAPE_KINDS), res=st.integers(50, 400), seed=st.integers(0, 10**6))
def test_exactness_on_generated_shapes(kind, res, seed):
    m = generate_shape(kind, res, seed=seed, deform=0.1)
    ops = build_incidence(m)
    prod = ops.d1.astype(np.int64) @ ops.d0.astype(np.int64)
    assert prod.count_nonzero() == 0


def test_constant_vector_in_kernel_of_d0():
    m = generate_shape("sphere", 100)
    ops = build_incidence(m)
    assert not np.any(ops.d0 @ np.ones(m.n_v))


def test_vertex_laplacian_identity(rng):
    m = generate_shape("cube", 100)
    ops = build_incidence(m)
    x = rng.standard_normal(m.n_v)
    adj = build_adjacency(m).vertex_adj
    deg = np.asarray(adj.sum(axis=1)).ravel()
    expected = deg * x - adj @ x
    assert np.allclose(ops.d0T @ (ops.d0 @ x), expected)


def test_adjacency_matches_brute_force(tetrahedron):
    m = generate_shape("torus", 60)
    adj = build_adjacency(m)
    # vertices: share an edge
    expected = np.zeros((m.n_v, m.n_v), dtype=int)
    for i, j in m.edges:
        expected[i, j] = expected[j, i] = 1
    assert np.array_equal(adj.vertex_adj.toarray(), expected)
    # faces: share an edge
    fexp = np.zeros((m.n_f, m.n_f), dtype=int)
    for a, b in m.edge_faces:
        if b >= 0:
            fexp[a, b] = fexp[b, a] = 1
    assert np.array_equal(adj.face_adj.toarray(), fexp)
    # edges: share a vertex
    e = m.edges
    share = (e[:, None, 0] == e[None, :, 0]) | (e[:, None, 0] == e[None, :, 1]) | \
            (e[:, None, 1] == e[None, :, 0]) | (e[:, None, 1] == e[None, :, 1])
    np.fill_diagonal(share, False)
    assert np.array_equal(adj.edge_adj.toarray(), share.astype(int))


def test_neighbor_lists_sorted(tetrahedron):
    nbrs = neighbor_lists(build_adjacency(tetrahedron).vertex_adj)
    assert nbrs == [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]


def test_boundary_edges(square):
    assert len(square.boundary_edges) == 4
    assert square.edge_faces.tolist()[square.edges.tolist().index([0, 2])] == [0, 1]


# ---------------------------------------------------------------- generators

@pytest.mark.parametrize("kind", SHAPE_KINDS)
@pytest.mark.parametrize("res", [50, 162, 1024])
def test_generated_shapes_are_closed_and_oriented(kind, res):
    m = generate_shape(kind, res, seed=2, deform=0.1)
    assert len(m.boundary_edges) == 0
    assert m.euler_characteristic == (0 if kind == "torus" else 2)
    assert_consistent_orientation(m)
    assert signed_volume(m) > 0


def test_sphere_162():
    m = generate_shape("sphere", 162, seed=1)
    assert m.n_v == 162
    assert m.euler_characteristic == 2 and m.n_e == 3 * m.n_v - 6


def test_generation_is_deterministic():
    a = generate_shape("cylinder", 300, seed=5, deform=0.12)
    b = generate_shape("cylinder", 300, seed=5, deform=0.12)
    assert a.vertices.tobytes() == b.vertices.tobytes()


def test_deformation_is_bounded():
    base = generate_shape("sphere", 200)
    d = generate_shape("sphere", 200, seed=9, deform=0.15)
    shift = np.linalg.norm(d.vertices - base.vertices, axis=1)
    assert shift.max() <= 0.15 + 1e-12 and shift.max() > 0


def test_resolution_bounds():
    with pytest.raises(ValueError):
        generate_shape("sphere", 10)
    with pytest.raises(ValueError):
        generate_shape("blob", 100)


def test_bipyramid_and_icosphere():
    b = bipyramid(8)
    assert b.n_v == 10 and b.euler_characteristic == 2
    assert_consistent_orientation(b)
    ico = icosphere(2)
    assert ico.n_v == 162 and ico.euler_characteristic == 2


# ---------------------------------------------------------------- normalization

def test_normalize_cube_corners():
    v = np.array([[x, y, z] for x in (-5, 5) for y in (-5, 5) for z in (-5, 5)], dtype=float)
    faces = generate_shape("cube", 50).faces[:0]
    m = normalize_mesh(Mesh(v, faces))
    assert np.allclose(np.linalg.norm(m.vertices, axis=1), 1.0)
    assert np.allclose(m.vertices.mean(axis=0), 0.0)
    assert np.allclose(m.vertices, v / (5 * math.sqrt(3)))


def test_normalize_idempotent_and_unit():
    m = normalize_mesh(generate_shape("torus", 100, seed=1, deform=0.1).with_vertices(
        generate_shape("torus", 100, seed=1, deform=0.1).vertices * 3 + 7))
    assert abs(np.linalg.norm(m.vertices, axis=1).max() - 1) < 1e-9
    again = normalize_mesh(m)
    assert np.allclose(again.vertices, m.vertices, atol=1e-9)


def test_normalize_degenerate():
    with pytest.raises(DegenerateGeometryError):
        normalize_mesh(Mesh(np.ones((3, 3)), [[0, 1, 2]], validate=True))


# ---------------------------------------------------------------- mutations

def test_zero_noise_is_identity():
    m = generate_shape("sphere", 100)
    out, removed = apply_mutation(m, Mutation("gaussian_noise", 0.0), 0)
    assert np.array_equal(out.vertices, m.vertices) and len(removed) == 0


def test_face_removal_count_is_binomial():
    m = generate_shape("sphere", 1002)
    assert m.n_f == 2000
    mean, sd = 0.1 * m.n_f, math.sqrt(m.n_f * 0.1 * 0.9)
    counts = [len(apply_mutation(m, Mutation("face_removal", 0.1), s)[1]) for s in range(30)]
    assert all(abs(c - mean) <= 3 * sd for c in counts)


def test_mutations_keep_vertex_indexing():
    m = generate_shape("cube", 200)
    out, removed = apply_mutation(m, Mutation("patch_removal", 0.02), 4)
    assert out.n_v == m.n_v
    kept = np.setdiff1d(np.arange(m.n_f), removed)
    assert np.array_equal(out.faces, m.faces[kept])
    ops = build_incidence(out)
    assert (ops.d1.astype(int) @ ops.d0.astype(int)).count_nonzero() == 0


def test_patch_removal_patches_are_connected():
    m = generate_shape("sphere", 400)
    nbrs = neighbor_lists(build_adjacency(m).face_adj)
    patch = bfs_order(nbrs, 0, 12)
    assert len(patch) == 12 and patch[0] == 0
    assert patch[1:4] == sorted(patch[1:4])


def test_mutation_parameter_ranges():
    m = generate_shape("sphere", 100)
    with pytest.raises(ValueError):
        apply_mutation(m, Mutation("gaussian_noise", 0.2), 0)
    with pytest.raises(ValueError):
        apply_mutation(m, Mutation("face_removal", 0.5), 0)
    with pytest.raises(ValueError):
        Mutation.parse("melt:0.1")


def test_removing_every_face_raises():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(EmptyMeshError):
        # p is clamped to 0.25 so the lone face survives most seeds; try until removal
        for s in range(100):
            apply_mutation(m, Mutation("face_removal", 0.25), s)


def test_mutation_labels():
    assert Mutation.parse("gaussian_noise:0.01").label() == "Gaussian Noise (lambda=0.010)"
    assert Mutation.parse("face_removal").label() == "Face Removal (p=0.10)"
