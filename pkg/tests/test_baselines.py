import numpy as np
import pytest

from fewgraph import tensor as T
from fewgraph.baselines import (
    metric_knn_predict,
    proto_adjacency,
    proto_predict,
    proto_preset_predict,
    siamese_predict,
    siamese_preset_predict,
)
from fewgraph.embedding import OmniglotEmbedding
from fewgraph.episodes import Episode, ProtocolError, sample_episode, synth_dataset
from fewgraph.nn import MLP, Module
from fewgraph.tensor import Tensor


class FlatEmbedder(Module):
    """Embeds an image by flattening it; lets tests place points exactly."""

    def __init__(self, dim: int):
        super().__init__()
        self.embed_dim = dim

    def __call__(self, x, train, rng=None):
        return x.reshape(x.shape[0], self.embed_dim)


def _vec_image(v):
    return np.asarray(v, dtype=float).reshape(1, 1, -1)


def _episode(labeled, query, answer, way, shots, unlabeled=()):
    return Episode(
        labeled=[(_vec_image(v), lab) for v, lab in labeled],
        unlabeled=[_vec_image(v) for v in unlabeled],
        query=_vec_image(query),
        answer=answer,
        way=way,
        shots=shots,
    )


def _real_episode(way=5, shots=1, seed=40):
    split = synth_dataset(8, 36, 6.0, np.random.default_rng(seed), n_per_class=6)
    episode = sample_episode(split, way, shots, 0, "fewshot", np.random.default_rng(seed + 1))
    embedder = OmniglotEmbedding(
        np.random.default_rng(seed + 2), in_channels=1, in_size=6, filters=8, embed_dim=16
    )
    return episode, embedder


class TestSiamese:
    def test_coincident_support_saturates(self):
        q = [0.0, 0.0, 0.0]
        far = [100.0, 0.0, 0.0]
        ep = _episode([(q, 1), (far, 2)], q, 1, way=2, shots=1)
        with T.no_grad():
            p = siamese_predict(ep, FlatEmbedder(3)).data[0]
        assert p[0] > 1 - 1e-15

    def test_equidistant_supports_vote_class_frequencies(self):
        sup = [([3.0, 0.0], 1), ([-3.0, 0.0], 1), ([0.0, 3.0], 2)]
        ep = _episode(sup, [0.0, 0.0], 1, way=2, shots=1)
        with T.no_grad():
            p = siamese_predict(ep, FlatEmbedder(2)).data[0]
        assert np.allclose(p, [2 / 3, 1 / 3], atol=1e-12)

    def test_rejects_unlabeled_nodes(self):
        ep = _episode([([1.0], 1), ([2.0], 2)], [0.0], 1, 2, 1, unlabeled=[[5.0]])
        with pytest.raises(ProtocolError):
            siamese_predict(ep, FlatEmbedder(1))

    def test_matches_frozen_kernel_preset(self):
        for seed in (50, 51, 52):
            episode, embedder = _real_episode(seed=seed)
            with T.no_grad():
                standalone = siamese_predict(episode, embedder).data[0]
            preset = siamese_preset_predict(episode, embedder)
            assert np.max(np.abs(standalone - preset)) < 1e-9

    def test_relabel_equivariance(self):
        episode, embedder = _real_episode(seed=53)
        perm = [3, 1, 5, 2, 4]  # slot l -> perm[l-1]
        relabeled = Episode(
            labeled=[(img, perm[lab - 1]) for img, lab in episode.labeled],
            unlabeled=episode.unlabeled,
            query=episode.query,
            answer=perm[episode.answer - 1],
            way=episode.way,
            shots=episode.shots,
        )
        with T.no_grad():
            base = siamese_predict(episode, embedder).data[0]
            moved = siamese_predict(relabeled, embedder).data[0]
        for lab in range(1, 6):
            assert abs(base[lab - 1] - moved[perm[lab - 1] - 1]) < 1e-12


class TestProtoAdjacency:
    def test_same_class_entry_is_inverse_q(self):
        adj = proto_adjacency([1, 1, 1, 1, 1, 2, 2, 2, 2, 2], q=5)
        assert adj[0, 1] == 0.2
        assert adj[0, 5] == 0.0

    def test_rows_sum_to_one(self):
        adj = proto_adjacency([1, 2, 3, 1, 2, 3], q=2)
        assert np.allclose(adj.sum(axis=1), 1.0, atol=1e-15)

    def test_idempotent(self):
        adj = proto_adjacency([2, 1, 3, 1, 2, 3, 3, 2, 1], q=3)
        assert np.allclose(adj @ adj, adj, atol=1e-12)

    def test_averages_match_brute_force_class_means(self):
        rng = np.random.default_rng(54)
        labels = [1, 2, 1, 3, 3, 2]
        x = rng.normal(size=(6, 4))
        mixed = proto_adjacency(labels, q=2) @ x
        for i, lab in enumerate(labels):
            rows = [j for j, l in enumerate(labels) if l == lab]
            assert np.allclose(mixed[i], x[rows].mean(axis=0), atol=1e-15)

    def test_unbalanced_rejected(self):
        with pytest.raises(ProtocolError):
            proto_adjacency([1, 1, 2], q=2)
        with pytest.raises(ProtocolError):
            proto_adjacency([], q=1)


class TestProto:
    def test_query_at_isolated_centroid_wins(self):
        c1, c2 = np.zeros(4), np.full(4, 20.0)
        d = np.array([1.0, -1.0, 0.0, 0.0])
        sup = [(c1 + d, 1), (c1 - d, 1), (c2 + d, 2), (c2 - d, 2)]
        ep = _episode(sup, c1, 1, way=2, shots=2)
        with T.no_grad():
            p = proto_predict(ep, FlatEmbedder(4)).data[0]
        assert p[0] > 0.99

    def test_single_shot_reduces_to_siamese(self):
        for seed in (55, 56, 57):
            episode, embedder = _real_episode(shots=1, seed=seed)
            with T.no_grad():
                a = proto_predict(episode, embedder).data[0]
                b = siamese_predict(episode, embedder).data[0]
            assert np.max(np.abs(a - b)) < 1e-9

    def test_within_class_order_leaves_prototypes_unchanged(self):
        episode, embedder = _real_episode(shots=3, seed=58)
        by_class: dict[int, list] = {}
        for img, lab in episode.labeled:
            by_class.setdefault(lab, []).append(img)
        rot = [(imgs[(i + 1) % len(imgs)], lab)
               for lab, imgs in sorted(by_class.items())
               for i in range(len(imgs))]
        rotated = Episode(
            labeled=rot, unlabeled=[], query=episode.query,
            answer=episode.answer, way=episode.way, shots=episode.shots,
        )
        with T.no_grad():
            a = proto_predict(episode, embedder).data[0]
            b = proto_predict(rotated, embedder).data[0]
        assert np.max(np.abs(a - b)) < 1e-12

    def test_matches_frozen_kernel_preset(self):
        for seed in (59, 60):
            episode, embedder = _real_episode(shots=3, seed=seed)
            with T.no_grad():
                standalone = proto_predict(episode, embedder).data[0]
            preset = proto_preset_predict(episode, embedder)
            assert np.max(np.abs(standalone - preset)) < 1e-9


class TestMetricKnn:
    def _metric(self, dim, seed=61):
        return MLP([dim, 8, 1], np.random.default_rng(seed))

    def test_identical_pair_scores_self_similarity(self):
        q = [1.0, 2.0, 3.0]
        ep = _episode([(q, 1), ([9.0, 9.0, 9.0], 2)], q, 1, way=2, shots=1)
        metric = self._metric(3)
        emb = FlatEmbedder(3)
        with T.no_grad():
            self_sim = metric(Tensor(np.zeros((1, 3)))).item()
            support = emb(Tensor(np.stack([_vec_image(v) for v in (q, [9.0, 9.0, 9.0])])), False)
            query = emb(Tensor(np.stack([_vec_image(q)])), False)
            diff = (support - query).abs()
            affin = metric(diff).data.reshape(-1)
            # the identical pair feeds the metric an exactly-zero row; its
            # score is MLP(0) up to batched-matmul summation order
            assert np.array_equal(diff.data[0], np.zeros(3))
            batch_sim = metric(Tensor(np.vstack([np.zeros(3), np.ones(3)]))).data[0, 0]
        assert affin[0] == batch_sim
        assert np.isclose(affin[0], self_sim, rtol=1e-12, atol=0)

    def test_output_is_probability_row_of_length_k(self):
        episode, embedder = _real_episode(way=5, shots=2, seed=62)
        metric = self._metric(16)
        with T.no_grad():
            p = metric_knn_predict(episode, embedder, metric).data
        assert p.shape == (1, 5)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_hard_vote_agrees_with_soft_argmax_under_margin(self):
        # brute-force the vote arithmetic: whenever the top support holds a
        # majority of the softmax mass, hard top-1 and soft argmax coincide
        checked = 0
        for seed in range(63, 75):
            episode, embedder = _real_episode(way=2, shots=1, seed=seed)
            metric = self._metric(16, seed=seed)
            with T.no_grad():
                soft = metric_knn_predict(episode, embedder, metric).data[0]
                hard = metric_knn_predict(episode, embedder, metric, hard_top1=True).data[0]
                support, query, labels = _support_query(episode, embedder)
                affin = metric((support - query).abs()).data.reshape(-1)
            w = np.exp(affin - affin.max())
            w /= w.sum()
            if w.max() > w.sum() - w.max():
                checked += 1
                assert int(np.argmax(soft)) == int(np.argmax(hard))
                assert labels[int(np.argmax(affin))] - 1 == int(np.argmax(hard))
        assert checked > 0


def _support_query(episode, embedder):
    from fewgraph.baselines import _embed_support_query

    return _embed_support_query(episode, embedder, False, None)
