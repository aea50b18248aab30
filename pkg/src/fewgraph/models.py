"""Episode classifiers: the graph network, its active-query variant, and the
baseline reductions, all behind one interface.

Every model exposes `log_scores(episode, train, rng) -> Tensor (1, K)` of
log-probabilities over the episode's K class slots, plus the parameter-tree
methods inherited from Module. `predict` is the eval-mode convenience that
returns plain probabilities.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .active import inject_label, score_unlabeled, select_one
from .baselines import metric_knn_predict, proto_predict, siamese_predict
from .embedding import (
    MiniImagenetEmbedding,
    OmniglotEmbedding,
    VectorEmbedding,
    init_nodes,
)
from .episodes import Episode, ProtocolError
from .gnn import METRIC_HIDDEN, ForwardDiagnostics, GnnModel
from .nn import MLP, Module
from .tensor import Tensor


def _make_embedder(rng: np.random.Generator, image_shape: tuple[int, int, int],
                   filters: int, embed_dim: int) -> Module:
    c, h, w = image_shape
    if (c, h, w) == (3, 84, 84):
        return MiniImagenetEmbedding(rng, embed_dim=embed_dim)
    if h != w:
        raise ProtocolError(f"embedding needs square images, got {image_shape}")
    if h <= 16:
        # grids this small come from reshaped vector data, where pooling
        # would throw away non-redundant pixels
        return VectorEmbedding(rng, in_channels=c, in_size=h, filters=filters,
                               embed_dim=embed_dim)
    return OmniglotEmbedding(rng, in_channels=c, in_size=h, filters=filters,
                             embed_dim=embed_dim)


class GnnClassifier(Module):
    """Embedding + learned-adjacency message passing + query readout."""

    def __init__(
        self,
        rng: np.random.Generator,
        way: int,
        image_shape: tuple[int, int, int],
        filters: int = 64,
        embed_dim: int = 64,
        nf: int = 96,
        n_blocks: int = 3,
        mask_self: bool = False,
    ):
        super().__init__()
        self.way = way
        self.embedder = self.register_child(
            "embedder", _make_embedder(rng, image_shape, filters, embed_dim)
        )
        self.embed_dim = self.embedder.embed_dim
        self.gnn = self.register_child(
            "gnn", GnnModel(self.embed_dim + way, way, rng, nf, n_blocks, mask_self)
        )

    def log_scores(
        self,
        episode: Episode,
        train: bool = False,
        rng: np.random.Generator | None = None,
        diag: ForwardDiagnostics | None = None,
    ) -> Tensor:
        nodes = init_nodes(episode, self.embedder, train, rng)
        return self.gnn.forward(nodes.x, nodes.query_index, diag)

    def predict(self, episode: Episode, rng: np.random.Generator | None = None) -> np.ndarray:
        with T.no_grad():
            return np.exp(self.log_scores(episode, train=False, rng=rng).data[0])


class ActiveGnnClassifier(GnnClassifier):
    """GNN that reveals one unlabeled node's label after the first block.

    policy 'learned' scores unlabeled nodes with the trained attention g;
    policy 'random' keeps the attention uniform and always samples, which is
    the random-query comparator run through the identical code path. The
    last selection (chosen index, weight) is kept on `last_selection` for
    diagnostics.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        way: int,
        image_shape: tuple[int, int, int],
        filters: int = 64,
        embed_dim: int = 64,
        nf: int = 96,
        n_blocks: int = 3,
        mask_self: bool = False,
        policy: str = "learned",
    ):
        super().__init__(rng, way, image_shape, filters, embed_dim, nf, n_blocks, mask_self)
        if policy not in ("learned", "random"):
            raise ProtocolError(f"unknown query policy {policy!r}")
        self.policy = policy
        self.scorer = self.register_child("scorer", MLP([self.gnn.widths[1], 32, 1], rng))
        self.last_selection: tuple[int, float] | None = None

    def log_scores(
        self,
        episode: Episode,
        train: bool = False,
        rng: np.random.Generator | None = None,
        diag: ForwardDiagnostics | None = None,
    ) -> Tensor:
        if not episode.unlabeled:
            raise ProtocolError("active model needs unlabeled nodes to query")
        if episode.unlabeled_labels is None:
            raise ProtocolError("episode carries no ground truth for unlabeled nodes")
        nodes = init_nodes(episode, self.embedder, train, rng)
        if diag is not None:
            diag.features.append(nodes.x)
        x1 = self.gnn.block_forward(0, nodes.x, diag)
        unl = nodes.unlabeled_indices

        if self.policy == "learned":
            att = score_unlabeled(x1, unl, self.scorer)
            i_rel, w = select_one(att, "train" if train else "test", rng)
        else:
            att = Tensor(np.full((1, len(unl)), 1.0 / len(unl)))
            i_rel, w = select_one(att, "train", rng)
        self.last_selection = (i_rel, float(w.data.reshape(())))

        label = episode.unlabeled_labels[i_rel]
        x1 = inject_label(
            x1, unl[i_rel], unl, w, label,
            label_offset=self.gnn.nf + self.embed_dim, way=self.way,
        )
        if diag is not None:
            diag.features.append(x1)
        x = x1
        for k in range(1, len(self.gnn.blocks)):
            x = self.gnn.block_forward(k, x, diag)
            if diag is not None:
                diag.features.append(x)
        return self.gnn.readout_query(x, nodes.query_index)


class SiameseClassifier(Module):
    def __init__(self, rng, way, image_shape, filters=64, embed_dim=64, **_):
        super().__init__()
        self.way = way
        self.embedder = self.register_child(
            "embedder", _make_embedder(rng, image_shape, filters, embed_dim)
        )

    def log_scores(self, episode, train=False, rng=None):
        return siamese_predict(episode, self.embedder, train, rng).log()

    def predict(self, episode, rng=None):
        with T.no_grad():
            return siamese_predict(episode, self.embedder, False, rng).data[0]


class ProtoClassifier(Module):
    def __init__(self, rng, way, image_shape, filters=64, embed_dim=64, **_):
        super().__init__()
        self.way = way
        self.embedder = self.register_child(
            "embedder", _make_embedder(rng, image_shape, filters, embed_dim)
        )

    def log_scores(self, episode, train=False, rng=None):
        return proto_predict(episode, self.embedder, train, rng).log()

    def predict(self, episode, rng=None):
        with T.no_grad():
            return proto_predict(episode, self.embedder, False, rng).data[0]


class MetricKnnClassifier(Module):
    def __init__(self, rng, way, image_shape, filters=64, embed_dim=64, **_):
        super().__init__()
        self.way = way
        self.embedder = self.register_child(
            "embedder", _make_embedder(rng, image_shape, filters, embed_dim)
        )
        self.metric = self.register_child(
            "metric", MLP([self.embedder.embed_dim, *METRIC_HIDDEN, 1], rng)
        )

    def log_scores(self, episode, train=False, rng=None):
        return metric_knn_predict(episode, self.embedder, self.metric, train, rng).log()

    def predict(self, episode, rng=None, hard_top1=False):
        with T.no_grad():
            return metric_knn_predict(
                episode, self.embedder, self.metric, False, rng, hard_top1
            ).data[0]


MODEL_KINDS = ("gnn", "siamese", "proto", "metric-knn")


def build_model(
    kind: str,
    rng: np.random.Generator,
    way: int,
    image_shape: tuple[int, int, int],
    *,
    filters: int = 64,
    embed_dim: int = 64,
    nf: int = 96,
    n_blocks: int = 3,
    mask_self: bool = False,
    query_policy: str | None = None,
) -> Module:
    if kind == "gnn" and query_policy is not None:
        return ActiveGnnClassifier(
            rng, way, image_shape, filters, embed_dim, nf, n_blocks, mask_self,
            policy=query_policy,
        )
    if kind == "gnn":
        return GnnClassifier(rng, way, image_shape, filters, embed_dim, nf, n_blocks, mask_self)
    if kind == "siamese":
        return SiameseClassifier(rng, way, image_shape, filters, embed_dim)
    if kind == "proto":
        return ProtoClassifier(rng, way, image_shape, filters, embed_dim)
    if kind == "metric-knn":
        return MetricKnnClassifier(rng, way, image_shape, filters, embed_dim)
    raise ProtocolError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")


def gradcheck_cases(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    """Model-level gradient checks against central finite differences."""
    from .episodes import synth_dataset, sample_episode
    from .gnn import edge_metric
    from .gradcheck import check_grads
    from .harness import episode_loss

    cases: list[tuple[str, float, float]] = []

    split = synth_dataset(4, 64, 6.0, np.random.default_rng(11), n_per_class=6)
    episode = sample_episode(split, 2, 1, 0, "fewshot", np.random.default_rng(12))
    model = GnnClassifier(
        np.random.default_rng(13), way=2, image_shape=split.image_shape,
        filters=8, embed_dim=16, nf=16,
    )
    params = model.parameters()
    err = check_grads(
        lambda: episode_loss(model, episode, train=True),
        list(params.values()),
        step=1e-4,
        probes_per_param=2,
        rng=np.random.default_rng(14),
    )
    cases.append(("model-end-to-end", err, 1e-4))

    metric = MLP([6, 8, 1], np.random.default_rng(15))
    x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    v = Tensor(rng.normal(size=(5, 5)))
    err = check_grads(lambda: (edge_metric(x, metric) * v).sum(), [x], step=1e-5)
    cases.append(("edge-metric-through-abs", err, 1e-4))

    scorer = MLP([7, 32, 1], np.random.default_rng(16))
    x1 = Tensor(rng.normal(size=(6, 7)))
    v = Tensor(rng.normal(size=(1, 3)))
    err = check_grads(
        lambda: (score_unlabeled(x1, [2, 3, 4], scorer) * v).sum(),
        list(scorer.parameters().values()),
        step=1e-5,
    )
    cases.append(("attention-vs-scorer-params", err, 1e-4))

    sia_model = SiameseClassifier(
        np.random.default_rng(17), way=2, image_shape=split.image_shape,
        filters=4, embed_dim=8,
    )
    err = check_grads(
        lambda: episode_loss(sia_model, episode, train=True),
        list(sia_model.parameters().values()),
        step=1e-4,
        probes_per_param=2,
        rng=np.random.default_rng(18),
    )
    cases.append(("siamese-loss-vs-embedding", err, 1e-4))

    return cases
