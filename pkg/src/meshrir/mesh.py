"""Scene meshes: OBJ I/O, quadric edge-collapse simplification, Hausdorff
distance, graph conversion and canonical placement."""
from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


class MeshParseError(MeshError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class SimplificationWarning(UserWarning):
    """Edge collapse ran out of legal collapses before reaching the target."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) metres
    faces: np.ndarray  # (F, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("mesh has non-finite vertex coordinates")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("face repeats a vertex index")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_areas(self) -> np.ndarray:
        t = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)


@dataclass
class SceneGraph:
    node_features: np.ndarray  # (N, 3) vertex coordinates
    edges: np.ndarray  # (E, 2), i < j, sorted, unique

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(self.edges):
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise MeshError("scene graph has a self-loop")
            if self.edges.min() < 0 or self.edges.max() >= self.n_nodes:
                raise MeshError("edge index out of range")

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)

    def adjacency(self) -> sparse.csr_matrix:
        n = self.n_nodes
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def canonical_edges(pairs: np.ndarray) -> np.ndarray:
    """Sort each pair, drop self-loops and duplicates, lexicographic order."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if len(pairs) == 0:
        return pairs
    return np.unique(pairs, axis=0)


# ---------------------------------------------------------------------------
# OBJ I/O


def _obj_index(token: str, n_vertices: int, path, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshParseError(path, lineno, f"bad face index {token!r}") from None
    if idx == 0:
        raise MeshParseError(path, lineno, "OBJ indices are 1-based; got 0")
    idx = idx - 1 if idx > 0 else n_vertices + idx
    if not 0 <= idx < n_vertices:
        raise MeshParseError(
            path, lineno, f"face index {token!r} out of range ({n_vertices} vertices so far)"
        )
    return idx


def load_mesh(path) -> TriangleMesh:
    """Read v/f records from a Wavefront OBJ; polygons are fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            if toks[0] == "v":
                try:
                    vertices.append([float(t) for t in toks[1:4]])
                except ValueError:
                    raise MeshParseError(path, lineno, "malformed vertex") from None
                if len(vertices[-1]) != 3:
                    raise MeshParseError(path, lineno, "vertex needs 3 coordinates")
            elif toks[0] == "f":
                if len(toks) < 4:
                    raise MeshParseError(path, lineno, "face needs at least 3 vertices")
                poly = [_obj_index(t, len(vertices), path, lineno) for t in toks[1:]]
                for i in range(1, len(poly) - 1):
                    tri = (poly[0], poly[i], poly[i + 1])
                    if len(set(tri)) == 3:
                        faces.append(tri)
    return TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_mesh(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v %.6f %.6f %.6f\n" % tuple(v))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % tuple(f + 1))


# ---------------------------------------------------------------------------
# construction helpers


def subdivide(mesh: TriangleMesh) -> TriangleMesh:
    """Split every triangle into four at edge midpoints (shape unchanged)."""
    f = mesh.faces
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    n0 = len(mesh.vertices)
    m = n0 + inverse.reshape(3, -1)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = m[0], m[1], m[2]
    faces = np.concatenate([
        np.stack([a, ab, ca], 1),
        np.stack([ab, b, bc], 1),
        np.stack([ca, bc, c], 1),
        np.stack([ab, bc, ca], 1),
    ])
    return TriangleMesh(np.vstack([mesh.vertices, mids]), faces)


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron refined ``subdivisions`` times: 20 * 4**subdivisions faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    mesh = TriangleMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)
    for _ in range(subdivisions):
        mesh = subdivide(mesh)
        mesh.vertices /= np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    mesh.vertices *= radius
    return mesh


def box_mesh(lo, hi, inward: bool = False) -> TriangleMesh:
    """Axis-aligned box as 12 triangles; normals outward unless ``inward``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    verts = lo + corners * (hi - lo)
    # corner index = 4x + 2y + z; quads listed counter-clockwise seen from outside
    quads = [
        (0, 1, 3, 2),  # x = lo
        (4, 6, 7, 5),  # x = hi
        (0, 4, 5, 1),  # y = lo
        (2, 3, 7, 6),  # y = hi
        (0, 2, 6, 4),  # z = lo
        (1, 5, 7, 3),  # z = hi
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    faces = np.array(faces)
    if inward:
        faces = faces[:, ::-1]
    return TriangleMesh(verts, faces)


def merge_meshes(meshes) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(faces))


def compact(mesh: TriangleMesh) -> TriangleMesh:
    """Drop unreferenced vertices, keeping the relative vertex order."""
    used = np.unique(mesh.faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces])


# ---------------------------------------------------------------------------
# quadric edge collapse


def _plane_quadrics(v: np.ndarray, faces: np.ndarray):
    """Area-weighted plane quadric per face, shape (F, 4, 4), and unit normals."""
    t = v[faces]
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    twice_area = np.linalg.norm(n, axis=1)
    unit = n / np.maximum(twice_area, 1e-300)[:, None]
    d = -np.einsum("ij,ij->i", unit, t[:, 0])
    p = np.concatenate([unit, d[:, None]], axis=1)
    q = np.einsum("fi,fj->fij", p, p) * (0.5 * twice_area)[:, None, None]
    return q, unit


def _boundary_quadrics(v, faces, normals, n_vertices, weight):
    """Constraint planes through open edges, perpendicular to their face."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces)), 3)
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    open_edge = counts[inv.reshape(-1)] == 1
    q = np.zeros((n_vertices, 4, 4))
    if not np.any(open_edge):
        return q
    a, b = e[open_edge, 0], e[open_edge, 1]
    d = v[b] - v[a]
    length = np.linalg.norm(d, axis=1)
    pn = np.cross(d, normals[fid[open_edge]])
    pn /= np.maximum(np.linalg.norm(pn, axis=1), 1e-300)[:, None]
    pd = -np.einsum("ij,ij->i", pn, v[a])
    p = np.concatenate([pn, pd[:, None]], axis=1)
    k = np.einsum("fi,fj->fij", p, p) * (weight * length ** 2)[:, None, None]
    np.add.at(q, a, k)
    np.add.at(q, b, k)
    return q


def _optimal_point(q: np.ndarray, va: np.ndarray, vb: np.ndarray):
    a = q[:3, :3]
    b = q[:3, 3]
    try:
        if abs(np.linalg.det(a)) > 1e-12 * max(1.0, np.abs(a).max() ** 3):
            p = np.linalg.solve(a, -b)
            return p, float(p @ a @ p + 2.0 * b @ p + q[3, 3])
    except np.linalg.LinAlgError:
        pass
    best = None
    for p in (va, vb, 0.5 * (va + vb)):
        c = float(p @ a @ p + 2.0 * b @ p + q[3, 3])
        if best is None or c < best[1]:
            best = (p, c)
    return best


def simplify_mesh(mesh: TriangleMesh, target_faces: int = 2000,
                  boundary_weight: float = 100.0) -> TriangleMesh:
    """Garland-Heckbert quadric edge collapse down to ``target_faces``.

    Each vertex carries the sum of its incident (area-weighted) plane
    quadrics; edges are contracted in order of least quadric error to the
    point minimising that error. Contractions that would flip a triangle,
    create a degenerate or duplicate one, or break the edge link condition
    are refused.
    If no legal contraction remains, the best mesh reached is returned and a
    ``SimplificationWarning`` is issued.
    """
    if target_faces < 4:
        raise MeshError("target_faces must be >= 4")
    if mesh.n_faces <= target_faces:
        return mesh

    v = mesh.vertices.copy()
    faces = mesh.faces.copy()
    nv = len(v)
    fq, normals = _plane_quadrics(v, faces)
    quadric = np.zeros((nv, 4, 4))
    for c in range(3):
        np.add.at(quadric, faces[:, c], fq)
    quadric += _boundary_quadrics(v, faces, normals, nv, boundary_weight)

    alive = np.ones(len(faces), dtype=bool)
    vert_faces = [set() for _ in range(nv)]
    for fi, f in enumerate(faces):
        for x in f:
            vert_faces[x].add(fi)
    version = np.zeros(nv, dtype=np.int64)
    removed = np.zeros(nv, dtype=bool)

    heap = []

    def push(a, b):
        if a > b:
            a, b = b, a
        p, cost = _optimal_point(quadric[a] + quadric[b], v[a], v[b])
        heapq.heappush(heap, (cost, a, b, int(version[a]), int(version[b]), p))

    edges = canonical_edges(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]))
    for a, b in edges:
        push(int(a), int(b))

    def neighbours(x):
        out = set()
        for fi in vert_faces[x]:
            out.update(faces[fi])
        out.discard(x)
        return out

    refused = {}

    def refuse(a, b):
        refused.setdefault(a, set()).add((a, b))
        refused.setdefault(b, set()).add((a, b))

    n_alive = len(faces)
    while n_alive > target_faces and heap:
        cost, a, b, va_, vb_, p = heapq.heappop(heap)
        if removed[a] or removed[b] or version[a] != va_ or version[b] != vb_:
            continue
        shared = vert_faces[a] & vert_faces[b]
        if not shared:
            continue
        # link condition: common neighbours are exactly the shared faces' apexes
        if len(neighbours(a) & neighbours(b)) != len(shared):
            refuse(a, b)
            continue
        moving = list((vert_faces[a] | vert_faces[b]) - shared)
        if moving:
            tri = faces[moving]
            # two faces becoming the same triangle (a tetrahedron folding flat)
            merged = np.sort(np.where(tri == b, a, tri), axis=1)
            if len(np.unique(merged, axis=0)) < len(merged):
                refuse(a, b)
                continue
            old = v[tri]
            new = old.copy()
            new[(tri == a) | (tri == b)] = p
            n_old = np.cross(old[:, 1] - old[:, 0], old[:, 2] - old[:, 0])
            n_new = np.cross(new[:, 1] - new[:, 0], new[:, 2] - new[:, 0])
            area_old = np.linalg.norm(n_old, axis=1)
            area_new = np.linalg.norm(n_new, axis=1)
            cosang = np.einsum("ij,ij->i", n_old, n_new) / np.maximum(area_old * area_new, 1e-300)
            if np.any(area_new <= 1e-12 * np.maximum(area_old, 1e-300)) or np.any(cosang < 0.2):
                refuse(a, b)
                continue
        # contract b into a
        for fi in shared:
            alive[fi] = False
            for x in faces[fi]:
                vert_faces[x].discard(fi)
        n_alive -= len(shared)
        for fi in list(vert_faces[b]):
            f = faces[fi]
            f[f == b] = a
            vert_faces[a].add(fi)
        vert_faces[b] = set()
        removed[b] = True
        v[a] = p
        quadric[a] += quadric[b]
        version[a] += 1
        ring = neighbours(a)
        for x in ring:
            push(a, x)
        # refused contractions near the change may be legal now
        for x in ring:
            for pair in refused.pop(x, ()):
                if not removed[pair[0]] and not removed[pair[1]] and a not in pair:
                    push(*pair)

    if n_alive > target_faces:
        warnings.warn(
            f"edge collapse stalled at {n_alive} faces (target {target_faces})",
            SimplificationWarning, stacklevel=2,
        )
    return compact(TriangleMesh(v, faces[alive]))


# ---------------------------------------------------------------------------
# Hausdorff distance


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed by area over the mesh surface."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MeshError("mesh has zero surface area")
    fi = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.vertices[mesh.faces[fi]]
    return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
            + (r1 * r2)[:, None] * t[:, 2])


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Exact Euclidean distance from points to triangles (row-wise broadcast).

    Voronoi-region closest-point test (Ericson, Real-Time Collision Detection).
    """
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        closest = a + v_in[..., None] * ab + w_in[..., None] * ac

        m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        closest = np.where(m_bc[..., None], b + w_bc[..., None] * (c - b), closest)

        m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w_ac = d2 / (d2 - d6)
        closest = np.where(m_ac[..., None], a + w_ac[..., None] * ac, closest)

        m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v_ab = d1 / (d1 - d3)
        closest = np.where(m_ab[..., None], a + v_ab[..., None] * ab, closest)

    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def point_mesh_distance(points: np.ndarray, mesh: TriangleMesh, k: int = 16) -> np.ndarray:
    """Exact distance from each point to the nearest point on ``mesh``.

    Candidate triangles come from a KD-tree over triangle centroids; a result
    is accepted only when no unexamined triangle can be closer (centroid
    distance minus the largest centroid-to-vertex radius), otherwise the
    point falls back to a ball query.
    """
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    radius = float(np.linalg.norm(tri - centroids[:, None], axis=2).max())
    tree = cKDTree(centroids)
    k = min(k, len(centroids))
    cd, ci = tree.query(points, k=k)
    cd = cd.reshape(len(points), k)
    ci = ci.reshape(len(points), k)
    dist = point_triangle_distance(points[:, None], tri[ci, 0], tri[ci, 1], tri[ci, 2]).min(axis=1)
    unsure = np.flatnonzero(cd[:, -1] - radius < dist) if k < len(centroids) else []
    for i in unsure:
        cand = tree.query_ball_point(points[i], dist[i] + radius)
        t = tri[cand]
        dist[i] = point_triangle_distance(points[i], t[:, 0], t[:, 1], t[:, 2]).min()
    return dist


def hausdorff_distance(a: TriangleMesh, b: TriangleMesh, samples: int = 10000,
                       seed: int = 0) -> float:
    """Symmetric Hausdorff estimate from area-uniform surface samples."""
    if samples < 1:
        raise MeshError("samples must be >= 1")
    if a.n_faces == 0 or b.n_faces == 0:
        raise MeshError("Hausdorff distance needs non-empty meshes")
    rng = np.random.default_rng(seed)
    pa = sample_surface(a, samples, rng)
    pb = sample_surface(b, samples, rng)
    return float(max(point_mesh_distance(pa, b).max(), point_mesh_distance(pb, a).max()))


# ---------------------------------------------------------------------------
# graph conversion / placement


def mesh_to_graph(mesh: TriangleMesh, weld_epsilon: float = 1e-4) -> SceneGraph:
    """Weld near-coincident vertices, then take triangle sides as edges.

    Nodes are numbered by the lowest original vertex index in each welded
    group and carry that vertex's coordinates.
    """
    if weld_epsilon < 0:
        raise MeshError("weld_epsilon must be >= 0")
    n = len(mesh.vertices)
    if n == 0:
        return SceneGraph(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))
    pairs = cKDTree(mesh.vertices).query_pairs(weld_epsilon, output_type="ndarray")
    if len(pairs):
        links = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, group = connected_components(links, directed=False)
    else:
        group = np.arange(n)
    # relabel groups by first occurrence so node ids follow vertex order
    first = np.full(group.max() + 1, n, dtype=np.int64)
    np.minimum.at(first, group, np.arange(n))
    order = np.argsort(first, kind="stable")
    label = np.empty_like(order)
    label[order] = np.arange(len(order))
    node_of_vertex = label[group]
    features = mesh.vertices[first[order]]
    f = node_of_vertex[mesh.faces]
    edges = canonical_edges(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]))
    return SceneGraph(features, edges)


def normalize_scene(mesh: TriangleMesh, source, listener):
    """Translate so the bounding-box minimum sits at the origin (no scaling)."""
    source = np.asarray(source, dtype=np.float64)
    listener = np.asarray(listener, dtype=np.float64)
    lo, hi = mesh.bounds()
    for name, p in (("source", source), ("listener", listener)):
        if p.shape != (3,) or np.any(p < lo) or np.any(p > hi):
            raise MeshError(f"{name} {p.tolist()} lies outside the mesh bounding box "
                            f"{lo.tolist()} .. {hi.tolist()}")
    return TriangleMesh(mesh.vertices - lo, mesh.faces.copy()), source - lo, listener - lo
