import numpy as np
import pytest

from fewgraph import tensor as T
from fewgraph.episodes import ProtocolError, sample_episode, synth_dataset
from fewgraph.models import (
    ActiveGnnClassifier,
    GnnClassifier,
    MODEL_KINDS,
    build_model,
)
from fewgraph.tensor import backward


def _split(seed=70, classes=8, dim=36):
    return synth_dataset(classes, dim, 6.0, np.random.default_rng(seed), n_per_class=10)


def _model_args(split):
    return dict(image_shape=split.image_shape, filters=8, embed_dim=16, nf=8, n_blocks=2)


class TestBuildModel:
    def test_every_kind_constructs_and_predicts(self):
        split = _split()
        episode = sample_episode(split, 3, 1, 0, "fewshot", np.random.default_rng(71))
        for kind in MODEL_KINDS:
            model = build_model(kind, np.random.default_rng(72), 3, split.image_shape,
                                filters=8, embed_dim=16, nf=8, n_blocks=2)
            p = model.predict(episode)
            assert p.shape == (3,)
            assert abs(p.sum() - 1.0) < 1e-9
            assert np.all(p >= 0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ProtocolError):
            build_model("mlp", np.random.default_rng(0), 3, (1, 6, 6))

    def test_query_policy_selects_active_variant(self):
        split = _split()
        model = build_model("gnn", np.random.default_rng(73), 3, split.image_shape,
                            filters=8, embed_dim=16, nf=8, n_blocks=2,
                            query_policy="learned")
        assert isinstance(model, ActiveGnnClassifier)
        plain = build_model("gnn", np.random.default_rng(73), 3, split.image_shape,
                            filters=8, embed_dim=16, nf=8, n_blocks=2)
        assert not isinstance(plain, ActiveGnnClassifier)

    def test_log_scores_shape_and_normalization(self):
        split = _split(seed=74)
        episode = sample_episode(split, 4, 2, 0, "fewshot", np.random.default_rng(75))
        for kind in MODEL_KINDS:
            model = build_model(kind, np.random.default_rng(76), 4, split.image_shape,
                                filters=8, embed_dim=16, nf=8, n_blocks=2)
            with T.no_grad():
                out = model.log_scores(episode)
            assert out.shape == (1, 4)
            assert abs(np.exp(out.data).sum() - 1.0) < 1e-9


class TestActiveModel:
    def _episode(self, split, seed=80):
        return sample_episode(split, 3, 1, 2, "active", np.random.default_rng(seed))

    def _model(self, split, policy="learned", seed=81):
        return ActiveGnnClassifier(
            np.random.default_rng(seed), 3, split.image_shape,
            filters=8, embed_dim=16, nf=8, n_blocks=2, policy=policy,
        )

    def test_requires_unlabeled_nodes(self):
        split = _split(seed=82)
        model = self._model(split)
        fewshot = sample_episode(split, 3, 1, 0, "fewshot", np.random.default_rng(83))
        with pytest.raises(ProtocolError):
            model.log_scores(fewshot)

    def test_requires_ground_truth_labels(self):
        split = _split(seed=84)
        model = self._model(split)
        episode = self._episode(split)
        episode.unlabeled_labels = None
        with pytest.raises(ProtocolError):
            model.log_scores(episode)

    def test_test_time_forward_is_deterministic(self):
        split = _split(seed=85)
        model = self._model(split)
        episode = self._episode(split)
        with T.no_grad():
            a = model.log_scores(episode, train=False).data
            b = model.log_scores(episode, train=False).data
        assert np.array_equal(a, b)
        assert model.last_selection is not None

    def test_selection_recorded_with_attention_weight(self):
        split = _split(seed=86)
        model = self._model(split)
        episode = self._episode(split)
        with T.no_grad():
            model.log_scores(episode, train=False)
        i, w = model.last_selection
        assert 0 <= i < len(episode.unlabeled)
        assert 0 < w <= 1

    def test_random_policy_keeps_uniform_weight(self):
        split = _split(seed=87)
        model = self._model(split, policy="random")
        episode = self._episode(split)
        r = len(episode.unlabeled)
        with T.no_grad():
            model.log_scores(episode, train=False, rng=np.random.default_rng(88))
        _, w = model.last_selection
        assert abs(w - 1.0 / r) < 1e-15

    def test_random_policy_samples_uniformly(self):
        split = _split(seed=89)
        model = self._model(split, policy="random")
        episode = self._episode(split)
        rng = np.random.default_rng(90)
        n = 3000
        r = len(episode.unlabeled)
        counts = np.zeros(r)
        with T.no_grad():
            for _ in range(n):
                model.log_scores(episode, train=False, rng=rng)
                counts[model.last_selection[0]] += 1
        se = np.sqrt((1 / r) * (1 - 1 / r) / n)
        assert np.all(np.abs(counts / n - 1 / r) <= 3 * se)

    def test_loss_gradient_reaches_scorer(self):
        from fewgraph.harness import episode_loss

        split = _split(seed=91)
        model = self._model(split)
        episode = self._episode(split, seed=92)
        with T.Trace():
            loss = episode_loss(model, episode, train=True, rng=np.random.default_rng(93))
            backward(loss)
        mass = sum(
            float(np.abs(p.grad).sum())
            for name, p in model.parameters().items()
            if name.startswith("scorer.")
        )
        assert mass > 0

    def test_invalid_policy_rejected(self):
        split = _split(seed=94)
        with pytest.raises(ProtocolError):
            self._model(split, policy="greedy")
