"""Learned-adjacency graph network over episode nodes.

Each block recomputes a pairwise similarity kernel from the current node
features, mixes nodes through it alongside an identity operator, and densely
concatenates the result onto its input:

    pre(i, j) = MLP(|x_i - x_j|)          symmetric scalar metric
    adj       = row-softmax(pre)           row-stochastic kernel
    x^(k+1)   = [leaky_relu(adj @ x @ t_adj + x @ t_id), x^(k)]

The query node's final features map through one dense layer to K class
logits, reported as log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import MLP, Linear, Module
from .tensor import ShapeError, Tensor

METRIC_HIDDEN = (64, 32)


def edge_metric(x: Tensor, metric: MLP) -> Tensor:
    """Pre-softmax affinity matrix, bitwise symmetric.

    Each unordered pair is evaluated once and the scalar is scattered into
    both (i, j) and (j, i), so symmetry is exact rather than a float
    coincidence. The diagonal is the metric at zero difference.
    """
    n = x.shape[0]
    if n < 2:
        raise ShapeError(f"edge metric needs at least 2 nodes, got {n}")
    iu, ju = (idx.tolist() for idx in np.triu_indices(n, 1))
    di = (T.gather_rows(x, iu) - T.gather_rows(x, ju)).abs()
    s = metric(di).reshape(len(iu))
    upper = T.scatter_add_2d(s, iu, ju, (n, n))
    lower = T.scatter_add_2d(s, ju, iu, (n, n))
    zero_score = metric(Tensor(np.zeros((1, x.shape[1]))))
    diag_vals = T.matmul(Tensor(np.ones((n, 1))), zero_score).reshape(n)
    diag = T.scatter_add_2d(diag_vals, list(range(n)), list(range(n)), (n, n))
    return (upper + lower) + diag


def normalize_kernel(pre: Tensor, mask_self: bool = False) -> Tensor:
    """Row-softmax of the pre-softmax metric; optionally exclude self-edges."""
    if np.isnan(pre.data).any():
        raise T.NumericError("pre-softmax metric contains NaN")
    if mask_self:
        n = pre.shape[0]
        pre = pre + Tensor(np.diag(np.full(n, -1e30)))
    return T.softmax_rows(pre)


def graph_conv(
    x: Tensor, adj: Tensor, theta_adj: Tensor, theta_id: Tensor, rho: bool = True
) -> Tensor:
    """One message-passing layer over the generator family {adj, identity}."""
    if adj.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"adjacency {adj.shape} does not match {x.shape[0]} nodes")
    if theta_adj.shape != theta_id.shape or theta_adj.shape[0] != x.shape[1]:
        raise ShapeError(
            f"update weights {theta_adj.shape}/{theta_id.shape} do not match "
            f"feature width {x.shape[1]}"
        )
    out = T.matmul(T.matmul(adj, x), theta_adj) + T.matmul(x, theta_id)
    return T.leaky_relu(out) if rho else out


class GnnBlock(Module):
    def __init__(self, d_in: int, nf: int, rng: np.random.Generator):
        super().__init__()
        self.metric = self.register_child("metric", MLP([d_in, *METRIC_HIDDEN, 1], rng))
        self.theta_adj = self.register("theta_adj", _fanin(rng, d_in, nf))
        self.theta_id = self.register("theta_id", _fanin(rng, d_in, nf))


def _fanin(rng: np.random.Generator, d_in: int, nf: int) -> Tensor:
    bound = 1.0 / np.sqrt(d_in)
    return Tensor(rng.uniform(-bound, bound, (d_in, nf)), requires_grad=True)


@dataclass
class ForwardDiagnostics:
    """Per-block internals kept for invariant checks and the active policy."""

    pre_metrics: list[Tensor] = field(default_factory=list)
    adjacencies: list[Tensor] = field(default_factory=list)
    features: list[Tensor] = field(default_factory=list)


class GnnModel(Module):
    """Stack of dense blocks plus the query readout.

    Widths follow the dense-connection arithmetic d_{k+1} = d_k + nf, so a
    5-way episode with 64-dim embeddings runs 69 -> 165 -> 261 -> 357.
    """

    def __init__(
        self,
        d0: int,
        way: int,
        rng: np.random.Generator,
        nf: int = 96,
        n_blocks: int = 3,
        mask_self: bool = False,
    ):
        super().__init__()
        self.way, self.nf, self.mask_self = way, nf, mask_self
        self.widths = [d0 + nf * k for k in range(n_blocks + 1)]
        self.blocks = [
            self.register_child(f"block{k}", GnnBlock(self.widths[k], nf, rng))
            for k in range(n_blocks)
        ]
        self.readout = self.register_child("readout", Linear(self.widths[-1], way, rng))

    def block_forward(
        self, k: int, x: Tensor, diag: ForwardDiagnostics | None = None
    ) -> Tensor:
        blk = self.blocks[k]
        pre = edge_metric(x, blk.metric)
        adj = normalize_kernel(pre, self.mask_self)
        h = graph_conv(x, adj, blk.theta_adj, blk.theta_id)
        if diag is not None:
            diag.pre_metrics.append(pre)
            diag.adjacencies.append(adj)
        return T.concat([h, x], axis=1)

    def readout_query(self, x: Tensor, query_index: int) -> Tensor:
        logits = self.readout(T.gather_rows(x, [query_index]))
        return T.log_softmax_rows(logits)

    def forward(
        self, x0: Tensor, query_index: int, diag: ForwardDiagnostics | None = None
    ) -> Tensor:
        """Log-probabilities (1 x K) for the query node."""
        x = x0
        if diag is not None:
            diag.features.append(x)
        for k in range(len(self.blocks)):
            x = self.block_forward(k, x, diag)
            if diag is not None:
                diag.features.append(x)
        return self.readout_query(x, query_index)
