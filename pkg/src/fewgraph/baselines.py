"""Metric-learning baselines, each written twice on purpose.

Every baseline here is a special case of the graph network: a fixed
similarity kernel plus a linear label vote. Each one exists as a standalone
code path (these functions) and as a frozen-kernel pass through the same
tensor primitives the GNN uses (`*_preset` functions built from
gnn.graph_conv with the learned kernel replaced by a frozen one and the
update weights replaced by a label selector). The pair is kept so either
path can serve as an oracle for the other; tests hold them to 1e-9.

All predictions are probability rows (1 x K): the vote weights are
row-stochastic and the label fields they average are one-hot.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .embedding import init_nodes
from .episodes import Episode, ProtocolError
from .gnn import graph_conv
from .nn import MLP, Module
from .tensor import Tensor


def _embed_support_query(episode: Episode, embedder: Module, train: bool,
                         rng: np.random.Generator | None) -> tuple[Tensor, Tensor, list[int]]:
    images = [img for img, _ in episode.labeled] + [episode.query]
    phi = embedder(Tensor(np.stack(images)), train, rng)
    s = len(episode.labeled)
    return T.gather_rows(phi, list(range(s))), T.gather_rows(phi, [s]), [
        lab for _, lab in episode.labeled
    ]


def _euclidean_row(query: Tensor, points: Tensor) -> Tensor:
    """Negative distances from the query to each point, as a (1, n) row."""
    diff = points - query
    d2 = (diff * diff).sum(axis=1)
    return T.neg(d2.sqrt()).reshape(1, points.shape[0])


def siamese_predict(
    episode: Episode,
    embedder: Module,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Distance-weighted vote of support label fields: one message pass."""
    if episode.unlabeled:
        raise ProtocolError("siamese baseline takes few-shot episodes (no unlabeled nodes)")
    support, query, labels = _embed_support_query(episode, embedder, train, rng)
    weights = T.softmax_rows(_euclidean_row(query, support))
    return T.matmul(weights, T.one_hot([lab - 1 for lab in labels], episode.way))


def proto_adjacency(labels: list[int], q: int) -> np.ndarray:
    """Within-class averaging operator: entry q^-1 where labels match, else 0."""
    labs = np.asarray(labels)
    if labs.size == 0:
        raise ProtocolError("empty support set")
    counts = np.bincount(labs)
    if not np.all(counts[counts > 0] == q):
        raise ProtocolError(f"support labels {labels} are not balanced at q={q}")
    return (labs[:, None] == labs[None, :]).astype(float) / q


def proto_predict(
    episode: Episode,
    embedder: Module,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Two-step reduction: average supports into class prototypes, then take
    a distance-weighted vote against the prototypes."""
    if episode.unlabeled:
        raise ProtocolError("prototypical baseline takes few-shot episodes")
    support, query, labels = _embed_support_query(episode, embedder, train, rng)
    K, q = episode.way, episode.shots
    mean_op = np.zeros((K, len(labels)))
    for j, lab in enumerate(labels):
        mean_op[lab - 1, j] = 1.0 / q
    if not np.allclose(mean_op.sum(axis=1), 1.0):
        raise ProtocolError(f"support labels {labels} are not balanced at q={q}")
    prototypes = T.matmul(Tensor(mean_op), support)
    weights = T.softmax_rows(_euclidean_row(query, prototypes))
    return T.matmul(weights, T.one_hot(list(range(K)), K))


def metric_knn_predict(
    episode: Episode,
    embedder: Module,
    metric: MLP,
    train: bool = False,
    rng: np.random.Generator | None = None,
    hard_top1: bool = False,
) -> Tensor:
    """Learned-metric vote between the query and each support embedding;
    no aggregation among support nodes. Identical images give the metric's
    self-similarity value MLP(0) exactly."""
    support, query, labels = _embed_support_query(episode, embedder, train, rng)
    s = support.shape[0]
    affin = metric((support - query).abs()).reshape(1, s)
    onehot = T.one_hot([lab - 1 for lab in labels], episode.way)
    if hard_top1:
        winner = int(np.argmax(affin.data))
        return T.gather_rows(onehot, [winner])
    return T.matmul(T.softmax_rows(affin), onehot)


def _frozen_rows(dist_row: np.ndarray) -> np.ndarray:
    row = np.exp(dist_row - dist_row.max())
    return row / row.sum()


def siamese_preset_predict(episode: Episode, embedder: Module) -> np.ndarray:
    """The same prediction produced by the general machinery: a frozen
    Euclidean kernel and one graph_conv whose update weights select the
    label field. Evaluation-only oracle."""
    if episode.unlabeled:
        raise ProtocolError("siamese preset takes few-shot episodes")
    with T.no_grad():
        nodes = init_nodes(episode, embedder, train=False, rng=None)
        x0 = nodes.x
        phi = x0.data[:, : nodes.embed_dim]
        n, s = nodes.n_nodes, nodes.n_labeled
        adj = np.zeros((n, n))
        for i in range(n):
            dists = -np.linalg.norm(phi[i] - phi[:s], axis=1)
            adj[i, :s] = _frozen_rows(dists)
        selector = np.zeros((x0.shape[1], episode.way))
        selector[nodes.embed_dim :, :] = np.eye(episode.way)
        zeros = np.zeros_like(selector)
        vote = graph_conv(x0, Tensor(adj), Tensor(selector), Tensor(zeros), rho=False)
        return vote.data[nodes.query_index]


def proto_preset_predict(episode: Episode, embedder: Module) -> np.ndarray:
    """Frozen two-block pass: within-class averaging kernel, then the
    Euclidean vote kernel over the averaged nodes."""
    if episode.unlabeled:
        raise ProtocolError("prototypical preset takes few-shot episodes")
    with T.no_grad():
        nodes = init_nodes(episode, embedder, train=False, rng=None)
        x0 = nodes.x
        n, s = nodes.n_nodes, nodes.n_labeled
        d = x0.shape[1]

        block = proto_adjacency(nodes.labels, episode.shots)
        adj1 = np.zeros((n, n))
        adj1[:s, :s] = block
        adj1[s:, s:] = np.eye(n - s)
        ident = np.eye(d)
        x1 = graph_conv(x0, Tensor(adj1), Tensor(ident), Tensor(np.zeros_like(ident)), rho=False)

        phi1 = x1.data[:, : nodes.embed_dim]
        adj2 = np.zeros((n, n))
        for i in range(n):
            dists = -np.linalg.norm(phi1[i] - phi1[:s], axis=1)
            adj2[i, :s] = _frozen_rows(dists)
        selector = np.zeros((d, episode.way))
        selector[nodes.embed_dim :, :] = np.eye(episode.way)
        vote = graph_conv(
            x1, Tensor(adj2), Tensor(selector), Tensor(np.zeros_like(selector)), rho=False
        )
        return vote.data[nodes.query_index]
