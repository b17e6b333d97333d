import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshrir import mesh as M


def write(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


CUBE_OBJ = """# unit cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def test_load_cube(tmp_path):
    m = M.load_mesh(write(tmp_path, CUBE_OBJ))
    assert len(m.vertices) == 8 and m.n_faces == 12


def test_fan_triangulation(tmp_path):
    m = M.load_mesh(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n"))
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_negative_indices(tmp_path):
    m = M.load_mesh(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n"))
    np.testing.assert_array_equal(m.faces, [[0, 1, 2]])


def test_parse_errors_name_line(tmp_path):
    bad = CUBE_OBJ + "f 1 2 99\n"
    with pytest.raises(M.MeshParseError, match=":22:"):
        M.load_mesh(write(tmp_path, bad))
    with pytest.raises(M.MeshParseError, match=":2:"):
        M.load_mesh(write(tmp_path, "v 0 0 0\nv 1 x 0\n"))
    with pytest.raises(FileNotFoundError):
        M.load_mesh(tmp_path / "missing.obj")


def test_save_load_round_trip(tmp_path):
    m = M.icosphere(1)
    M.save_mesh(m, tmp_path / "s.obj")
    back = M.load_mesh(tmp_path / "s.obj")
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)


def test_mesh_invariants():
    with pytest.raises(M.MeshError):
        M.TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(M.MeshError):
        M.TriangleMesh(np.zeros((3, 3)), [[0, 1, 1]])
    with pytest.raises(M.MeshError):
        M.TriangleMesh([[0, 0, np.inf]], np.zeros((0, 3)))


def test_simplify_pass_through():
    m = M.icosphere(3)  # 1280 faces
    assert M.simplify_mesh(m, 2000) is m
    m4 = M.icosphere(4)  # 5120 faces
    with pytest.raises(M.MeshError):
        M.simplify_mesh(m4, 3)


def test_simplify_icosphere_small():
    m = M.icosphere(4)
    out = M.simplify_mesh(m, 500)
    assert out.n_faces <= 500
    diag = np.linalg.norm(np.ptp(m.vertices, axis=0))
    assert M.hausdorff_distance(m, out, samples=4000) <= 0.02 * diag
    # valid closed manifold: every edge shared by exactly two faces
    f = out.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_simplify_keeps_box_geometry():
    room = M.subdivide(M.subdivide(M.subdivide(M.box_mesh((0, 0, 0), (5, 4, 3)))))
    out = M.simplify_mesh(room, 100)
    assert out.n_faces <= 100
    lo, hi = out.bounds()
    np.testing.assert_allclose(lo, 0, atol=1e-6)
    np.testing.assert_allclose(hi, (5, 4, 3), atol=1e-6)


def test_simplify_warns_when_stalled():
    # two separate tetrahedra (8 faces) cannot reach 4 faces without breaking manifoldness
    t = M.TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                       [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    two = M.merge_meshes([t, M.TriangleMesh(t.vertices + 5, t.faces)])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = M.simplify_mesh(two, 4)
    assert out.n_faces == 8
    assert any(issubclass(x.category, M.SimplificationWarning) for x in w)


def test_hausdorff_identity_and_translation():
    cube = M.box_mesh((0, 0, 0), (1, 1, 1))
    assert M.hausdorff_distance(cube, cube) <= 1e-9
    moved = M.TriangleMesh(cube.vertices + [0.1, 0, 0], cube.faces)
    assert M.hausdorff_distance(cube, moved, samples=10000) == pytest.approx(0.1, rel=0.01)
    fine = M.subdivide(M.subdivide(cube))
    assert M.hausdorff_distance(cube, fine) <= 1e-9
    with pytest.raises(M.MeshError):
        M.hausdorff_distance(cube, M.TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]]))


def test_hausdorff_symmetric():
    a = M.icosphere(2)
    b = M.TriangleMesh(a.vertices * 1.05 + 0.01, a.faces)
    assert M.hausdorff_distance(a, b, seed=3) == M.hausdorff_distance(b, a, seed=3) or \
        abs(M.hausdorff_distance(a, b) - M.hausdorff_distance(b, a)) < 5e-3


def brute_point_triangle(p, a, b, c, n=400):
    """Dense barycentric grid plus exact edge projections."""
    best = np.inf
    for u in np.linspace(0, 1, n):
        w = np.linspace(0, 1 - u, max(2, int(n * (1 - u))))
        pts = a + u * (b - a) + w[:, None] * (c - a)
        best = min(best, np.linalg.norm(pts - p, axis=1).min())
    return best


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_point_triangle_distance_against_grid(seed):
    rng = np.random.default_rng(seed)
    a, b, c, p = rng.normal(size=(4, 3))
    exact = M.point_triangle_distance(p, a, b, c)
    approx = brute_point_triangle(p, a, b, c)
    assert exact <= approx + 1e-12
    assert approx - exact <= 0.02 * (1 + np.linalg.norm(b - a) + np.linalg.norm(c - a))


def test_graph_examples():
    g = M.mesh_to_graph(M.TriangleMesh(np.eye(3), [[0, 1, 2]]))
    assert g.n_nodes == 3 and len(g.edges) == 3
    two = M.TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2], [1, 3, 2]])
    g = M.mesh_to_graph(two)
    assert g.n_nodes == 4 and len(g.edges) == 5
    # duplicated vertex (per-face export) is welded
    dup = M.TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]],
                         [[0, 1, 2], [3, 4, 2]])
    assert M.mesh_to_graph(dup, 1e-4).n_nodes == 4
    shifted = dup.vertices.copy()
    shifted[3, 0] += 1e-3  # near, but outside the weld radius
    near = M.TriangleMesh(shifted, dup.faces)
    assert M.mesh_to_graph(near, 1e-4).n_nodes == 5
    empty = M.mesh_to_graph(M.TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))))
    assert empty.n_nodes == 0 and len(empty.edges) == 0


def test_graph_adjacency_symmetric_no_loops():
    g = M.mesh_to_graph(M.icosphere(2))
    a = g.adjacency().toarray()
    assert np.array_equal(a, a.T) and not np.any(np.diag(a))
    assert len(np.unique(g.edges, axis=0)) == len(g.edges)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_graph_independent_of_orderings(seed):
    rng = np.random.default_rng(seed)
    m = M.icosphere(1)
    perm = rng.permutation(len(m.vertices))
    inv = np.argsort(perm)
    faces = inv[m.faces][rng.permutation(m.n_faces)]
    m2 = M.TriangleMesh(m.vertices[perm], faces)
    g1, g2 = M.mesh_to_graph(m), M.mesh_to_graph(m2)
    # map node ids back through coordinates
    key1 = {tuple(v): i for i, v in enumerate(g1.node_features)}
    relabel = np.array([key1[tuple(v)] for v in g2.node_features])
    e2 = M.canonical_edges(relabel[g2.edges])
    np.testing.assert_array_equal(e2, g1.edges)


def test_normalize_scene():
    box = M.box_mesh((-2, -2, 0), (3, 3, 3))
    m, s, l = M.normalize_scene(box, (0, 0, 1), (1, 1, 1))
    np.testing.assert_allclose(s, (2, 2, 1))
    np.testing.assert_allclose(m.bounds()[0], 0)
    at_origin = M.box_mesh((0, 0, 0), (1, 1, 1))
    m, s, _ = M.normalize_scene(at_origin, (0.5, 0.5, 0.5), (0.2, 0.2, 0.2))
    np.testing.assert_array_equal(m.vertices, at_origin.vertices)
    np.testing.assert_array_equal(s, (0.5, 0.5, 0.5))
    with pytest.raises(M.MeshError):
        M.normalize_scene(box, (100, 0, 0), (1, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_normalize_is_isometry(offset):
    box = M.box_mesh(np.array(offset), np.array(offset) + (4, 3, 2.5))
    s = np.array(offset) + (1, 1, 1)
    l = np.array(offset) + (3, 2, 2)
    m, s2, l2 = M.normalize_scene(box, s, l)
    assert np.linalg.norm(s2 - l2) == pytest.approx(np.linalg.norm(s - l), abs=1e-9)
    d1 = np.linalg.norm(box.vertices[:, None] - box.vertices[None], axis=2)
    d2 = np.linalg.norm(m.vertices[:, None] - m.vertices[None], axis=2)
    np.testing.assert_allclose(d1, d2, atol=1e-9)
