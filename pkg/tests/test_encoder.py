import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meshrir import encoder as E
from meshrir.mesh import SceneGraph, icosphere, mesh_to_graph


def graph(n, edges, feats=None):
    feats = np.zeros((n, 3)) if feats is None else feats
    return SceneGraph(feats, np.asarray(edges, dtype=np.int64).reshape(-1, 2))


def dense_gcn(n, edges, x, w):
    a = np.eye(n)
    for i, j in edges:
        a[i, j] = a[j, i] = 1
    d = np.diag(1 / np.sqrt(a.sum(1)))
    return d @ a @ d @ x @ w


def test_gcn_two_node_example():
    out = E.gcn_layer(graph(2, [[0, 1]]), [[1.0], [3.0]], [[1.0]], activation=False)
    np.testing.assert_allclose(out.numpy(), [[2.0], [2.0]])


def test_gcn_single_node():
    out = E.gcn_layer(graph(1, []), [[5.0]], [[2.0]], activation=False)
    np.testing.assert_allclose(out.numpy(), [[10.0]])


def test_gcn_zero_weight():
    g = mesh_to_graph(icosphere(1))
    x = np.random.default_rng(0).normal(size=(g.n_nodes, 3))
    assert not E.gcn_layer(g, x, np.zeros((3, 4))).numpy().any()


def test_gcn_shape_errors():
    with pytest.raises(E.EncoderError):
        E.gcn_layer(graph(2, [[0, 1]]), np.ones((3, 1)), np.ones((1, 1)))
    with pytest.raises(E.EncoderError):
        E.gcn_layer(graph(2, [[0, 1]]), np.ones((2, 2)), np.ones((3, 1)))


def test_gcn_relu():
    out = E.gcn_layer(graph(2, [[0, 1]]), [[-1.0], [-3.0]], [[1.0]])
    assert not out.numpy().any()


def test_gcn_dense_oracle_four_nodes_all_graphs():
    rng = np.random.default_rng(1)
    pairs = list(itertools.combinations(range(4), 2))
    for mask in range(1 << len(pairs)):
        edges = [p for k, p in enumerate(pairs) if mask >> k & 1]
        x, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
        got = E.gcn_layer(graph(4, edges), torch.as_tensor(x), torch.as_tensor(w), activation=False)
        np.testing.assert_allclose(got.numpy(), dense_gcn(4, edges, x, w), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_gcn_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    x = torch.as_tensor(rng.normal(size=(n, 3)))
    w = torch.as_tensor(rng.normal(size=(3, 5)))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    pe = [(inv[i], inv[j]) for i, j in edges]
    g2 = SceneGraph(np.zeros((n, 3)), E.canonical_edges(np.array(pe).reshape(-1, 2)))
    a = E.gcn_layer(graph(n, edges), x, w)
    b = E.gcn_layer(g2, x[perm], w)
    np.testing.assert_allclose(a.numpy()[perm], b.numpy(), atol=1e-12)


def test_pooled_size():
    assert E.pooled_size(10, 0.6) == 6
    assert E.pooled_size(35, 0.6) == 21
    assert E.pooled_size(3, 0.6) == 2
    assert E.pooled_size(1, 0.6) == 1


def test_square_adjacency_path():
    g = graph(3, [[0, 1], [1, 2]])
    a = g.adjacency().toarray()
    assert (a @ a)[0, 2] == 1
    edges = E.square_adjacency(g, np.arange(3))
    assert [0, 2] in edges.tolist()


def test_gpool_path_graph_connects_endpoints():
    g = graph(3, [[0, 1], [1, 2]])
    x = torch.tensor([[3.0], [-5.0], [2.0]], dtype=torch.float64)
    new, pooled, idx = E.gpool(g, x, 0.6, torch.tensor([1.0], dtype=torch.float64))
    assert list(idx) == [0, 2]
    assert new.edges.tolist() == [[0, 1]]  # endpoints now adjacent via A*A
    np.testing.assert_allclose(pooled.numpy()[:, 0], [3 / (1 + np.exp(-3)), 2 / (1 + np.exp(-2))])


def test_gpool_keep_all_gates_by_sigmoid():
    g = graph(4, [[0, 1], [1, 2], [2, 3]])
    x = torch.tensor([[1.0, 0.5], [2.0, 0.1], [0.3, 0.2], [4.0, 1.0]], dtype=torch.float64)
    p = torch.tensor([2.0, 0.0], dtype=torch.float64)
    new, pooled, idx = E.gpool(g, x, 1.0, p)
    assert sorted(idx.tolist()) == [0, 1, 2, 3]
    y = (x @ p / 2.0).numpy()
    np.testing.assert_allclose(pooled.numpy(), x.numpy()[idx] / (1 + np.exp(-y[idx]))[:, None])


def test_gpool_ties_prefer_smaller_index():
    g = graph(4, [[0, 1], [1, 2], [2, 3]])
    x = torch.ones((4, 1), dtype=torch.float64)
    _, _, idx = E.gpool(g, x, 0.5, torch.tensor([1.0], dtype=torch.float64))
    assert list(idx) == [0, 1]


def test_gpool_errors():
    with pytest.raises(E.EncoderError):
        E.gpool(graph(0, []), torch.zeros((0, 1)), 0.6, torch.ones(1))
    with pytest.raises(E.EncoderError):
        E.gpool(graph(2, [[0, 1]]), torch.ones((2, 1)), 0.6, torch.zeros(1))
    with pytest.raises(E.EncoderError):
        E.gpool(graph(2, [[0, 1]]), torch.ones((2, 1)), 0.0, torch.ones(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_gpool_kept_set_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 40))
    x = torch.as_tensor(rng.normal(size=(n, 4)))
    p = torch.as_tensor(rng.normal(size=4))
    edges = [(i, i + 1) for i in range(n - 1)]
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    g2 = graph(n, E.canonical_edges(np.array([(inv[i], inv[j]) for i, j in edges])))
    _, _, idx1 = E.gpool(graph(n, edges), x, 0.6, p)
    _, _, idx2 = E.gpool(g2, x[perm], 0.6, p)
    assert len(idx1) == E.pooled_size(n, 0.6)
    assert set(idx1.tolist()) == set(perm[idx2].tolist())


def test_readout():
    gap, gmp = E.readout(np.array([[1.0, 4.0], [3.0, 2.0]]))
    np.testing.assert_allclose(gap.numpy(), [2, 3])
    np.testing.assert_allclose(gmp.numpy(), [3, 4])
    row = np.array([[7.0, -1.0]])
    gap, gmp = E.readout(row)
    np.testing.assert_array_equal(gap.numpy(), row[0])
    np.testing.assert_array_equal(gmp.numpy(), row[0])
    with pytest.raises(E.EncoderError):
        E.readout(np.zeros((0, 2)))


def test_encoder_output_length_and_determinism():
    torch.manual_seed(0)
    enc = E.MeshEncoder()
    g = mesh_to_graph(icosphere(2))
    a = E.encode_mesh(g, enc)
    assert a.shape == (8,)
    assert np.array_equal(a, E.encode_mesh(g, enc))


def test_encoder_zero_params_gives_head_bias():
    torch.manual_seed(0)
    enc = E.MeshEncoder()
    with torch.no_grad():
        for w in enc.weights:
            w.zero_()
        for m in enc.head:
            if isinstance(m, torch.nn.Linear):
                m.weight.zero_()
    out = E.encode_mesh(mesh_to_graph(icosphere(1)), enc)
    np.testing.assert_allclose(out, enc.head[2].bias.detach().numpy(), atol=1e-7)


def test_encoder_permutation_invariant():
    torch.manual_seed(3)
    enc = E.MeshEncoder().double()
    m = icosphere(2)
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(m.vertices))
    inv = np.argsort(perm)
    from meshrir.mesh import TriangleMesh

    m2 = TriangleMesh(m.vertices[perm], inv[m.faces])
    np.testing.assert_allclose(E.encode_mesh(mesh_to_graph(m), enc),
                               E.encode_mesh(mesh_to_graph(m2), enc), atol=1e-10)


def test_encoder_gradient_matches_finite_differences():
    torch.manual_seed(5)
    rng = np.random.default_rng(5)
    n = 10
    edges = E.canonical_edges(np.array([(i, (i + 1) % n) for i in range(n)] + [(0, 5), (2, 7)]))
    g = SceneGraph(rng.normal(size=(n, 3)), edges)
    enc = E.MeshEncoder(hidden=6, stages=2, head_hidden=5).double()
    c = torch.as_tensor(rng.normal(size=8))

    def f():
        with torch.no_grad():
            return float(enc(g) @ c)

    enc.zero_grad()
    (enc(g) @ c).backward()
    h = 1e-4
    worst = 0.0
    for prm in enc.parameters():
        flat = prm.data.view(-1)
        grad = prm.grad.view(-1)
        for k in range(flat.numel()):
            old = float(flat[k])
            flat[k] = old + h
            up = f()
            flat[k] = old - h
            down = f()
            flat[k] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - float(grad[k])) / max(1.0, abs(fd)))
    assert worst <= 1e-3


def test_build_embedding():
    e = E.build_embedding(np.zeros(8), (1, 2, 3), (4, 5, 6))
    np.testing.assert_array_equal(e, [0] * 8 + [1, 2, 3, 4, 5, 6])
    assert len(e) == E.EMBEDDING_DIM == 14
    assert not np.array_equal(e, E.build_embedding(np.zeros(8), (4, 5, 6), (1, 2, 3)))
    with pytest.raises(E.EncoderError):
        E.build_embedding(np.zeros(7), (1, 2, 3), (4, 5, 6))
    with pytest.raises(E.EncoderError):
        E.build_embedding(np.full(8, np.nan), (1, 2, 3), (4, 5, 6))
