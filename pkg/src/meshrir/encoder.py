"""Graph encoder: scene graph -> 8-dim mesh latent, plus scene embedding.

Stacked (GCN -> top-K graph pooling) stages; after every pooling the node
features are summarised by channel-wise mean (GAP) and max (GMP). The
per-stage summaries are summed, concatenated and mapped to the latent by a
small MLP head.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np
import torch
from scipy import sparse
from torch import nn

from .mesh import SceneGraph, canonical_edges

LATENT_DIM = 8
EMBEDDING_DIM = LATENT_DIM + 6


class EncoderError(ValueError):
    pass


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.get_default_dtype()
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def normalized_adjacency(graph: SceneGraph, dtype=torch.float32) -> torch.Tensor:
    """Dense D^-1/2 (A + I) D^-1/2."""
    n = graph.n_nodes
    a_hat = np.eye(n)
    e = graph.edges
    a_hat[e[:, 0], e[:, 1]] = 1.0
    a_hat[e[:, 1], e[:, 0]] = 1.0
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return torch.as_tensor(d[:, None] * a_hat * d[None, :], dtype=dtype)


def gcn_layer(graph: SceneGraph, x, weight, activation: bool = True, adjacency=None):
    """One propagation step sigma(D^-1/2 (A+I) D^-1/2 X W); topology unchanged."""
    weight = _as_tensor(weight)
    x = _as_tensor(x, weight)
    if x.shape[0] != graph.n_nodes:
        raise EncoderError(f"feature rows {x.shape[0]} != graph nodes {graph.n_nodes}")
    if x.shape[1] != weight.shape[0]:
        raise EncoderError(f"feature width {x.shape[1]} != weight rows {weight.shape[0]}")
    if adjacency is None:
        adjacency = normalized_adjacency(graph, x.dtype)
    out = adjacency @ (x @ weight)
    return torch.relu(out) if activation else out


def pooled_size(n: int, keep_ratio: float) -> int:
    """ceil(keep_ratio * n) computed exactly (0.6 * 35 is not 21 in floats)."""
    r = Fraction(keep_ratio).limit_denominator(10 ** 6)
    return max(1, -(-n * r.numerator // r.denominator))


def square_adjacency(graph: SceneGraph, keep: np.ndarray) -> np.ndarray:
    """Edges of the subgraph of A*A induced by ``keep`` (relabelled 0..K-1)."""
    a = graph.adjacency()
    a2 = (a @ a).tocsr()[keep][:, keep].tocoo()
    pairs = np.stack([a2.row, a2.col], axis=1)[a2.data > 0]
    return canonical_edges(pairs)


def gpool(graph: SceneGraph, x, keep_ratio: float, projection):
    """Top-K pooling: keep the ceil(keep_ratio*N) best-scoring nodes.

    Scores are y = X p / |p|; kept rows are gated by sigmoid(y). Ties go to
    the smaller node index. Returns (pooled graph, pooled features, kept
    indices in score order).
    """
    projection = _as_tensor(projection)
    x = _as_tensor(x, projection)
    if graph.n_nodes == 0 or x.shape[0] == 0:
        raise EncoderError("cannot pool an empty graph")
    if not 0 < keep_ratio <= 1:
        raise EncoderError("keep_ratio must lie in (0, 1]")
    norm = torch.linalg.vector_norm(projection)
    if float(norm.detach()) == 0.0:
        raise EncoderError("projection vector must be nonzero")
    scores = (x @ projection) / norm
    k = pooled_size(graph.n_nodes, keep_ratio)
    order = torch.sort(scores.detach(), descending=True, stable=True).indices[:k]
    idx = order.numpy()
    pooled = x[order] * torch.sigmoid(scores[order])[:, None]
    new_graph = SceneGraph(graph.node_features[idx], square_adjacency(graph, idx))
    return new_graph, pooled, idx


def readout(x):
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EncoderError("readout needs a non-empty (N, C) feature matrix")
    return x.mean(dim=0), x.max(dim=0).values


class MeshEncoder(nn.Module):
    """GCN/gpool stack producing the mesh latent vector."""

    def __init__(self, hidden: int = 32, stages: int = 3, latent: int = LATENT_DIM,
                 keep_ratio: float = 0.6, head_hidden: int = 32):
        super().__init__()
        self.keep_ratio = keep_ratio
        widths = [3] + [hidden] * stages
        self.weights = nn.ParameterList(
            nn.Parameter(torch.empty(a, b)) for a, b in zip(widths[:-1], widths[1:])
        )
        self.projections = nn.ParameterList(nn.Parameter(torch.empty(hidden)) for _ in range(stages))
        self.head = nn.Sequential(nn.Linear(2 * hidden, head_hidden), nn.ReLU(),
                                  nn.Linear(head_hidden, latent))
        for w in self.weights:
            nn.init.xavier_uniform_(w)
        for p in self.projections:
            nn.init.normal_(p)

    def forward(self, graph: SceneGraph, adjacency: torch.Tensor | None = None) -> torch.Tensor:
        if graph.n_nodes == 0:
            raise EncoderError("cannot encode an empty graph")
        dtype = self.weights[0].dtype
        x = torch.as_tensor(graph.node_features, dtype=dtype)
        gap_sum = gmp_sum = 0
        for stage, (w, p) in enumerate(zip(self.weights, self.projections)):
            x = gcn_layer(graph, x, w, adjacency=adjacency if stage == 0 else None)
            graph, x, _ = gpool(graph, x, self.keep_ratio, p)
            gap, gmp = readout(x)
            gap_sum = gap_sum + gap
            gmp_sum = gmp_sum + gmp
        return self.head(torch.cat([gap_sum, gmp_sum]))


def encode_mesh(graph: SceneGraph, encoder: MeshEncoder) -> np.ndarray:
    with torch.no_grad():
        return encoder(graph).double().numpy()


def build_embedding(latent, source, listener) -> np.ndarray:
    """Scene embedding [latent(8) | source(3) | listener(3)]."""
    latent = np.asarray(latent, dtype=np.float64).reshape(-1)
    source = np.asarray(source, dtype=np.float64).reshape(-1)
    listener = np.asarray(listener, dtype=np.float64).reshape(-1)
    if latent.shape != (LATENT_DIM,) or source.shape != (3,) or listener.shape != (3,):
        raise EncoderError(
            f"embedding parts must have lengths 8/3/3, got "
            f"{len(latent)}/{len(source)}/{len(listener)}"
        )
    out = np.concatenate([latent, source, listener])
    if not np.all(np.isfinite(out)):
        raise EncoderError("embedding has non-finite entries")
    return out
