"""Image embeddings and initial node features.

Every image in an episode passes through a small CNN; each graph node then
starts as the embedding concatenated with a label field: a one-hot vector for
labeled images, the uniform simplex point for unlabeled and query images.
Node order is fixed as [labeled..., unlabeled..., query].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .episodes import Episode
from .nn import BatchNorm, Conv2d, Dropout, Linear, Module
from .tensor import ShapeError, Tensor


class OmniglotEmbedding(Module):
    """Four conv blocks (conv3x3, batchnorm, maxpool2, leaky-relu) then one
    fully-connected layer, no nonlinearity after it.

    Works for any square input; pooling is skipped once the spatial extent
    drops below 2 so small synthetic images reuse the same four-block stack.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int = 1,
        in_size: int = 28,
        filters: int = 64,
        embed_dim: int = 64,
    ):
        super().__init__()
        self.in_channels, self.in_size = in_channels, in_size
        self.embed_dim = embed_dim
        self.pooled: list[bool] = []
        size, c = in_size, in_channels
        for i in range(4):
            self.register_child(f"conv{i}", Conv2d(c, filters, rng))
            self.register_child(f"bn{i}", BatchNorm(filters))
            self.pooled.append(size >= 2)
            if size >= 2:
                size //= 2
            c = filters
        self.fc = self.register_child("fc", Linear(filters * size * size, embed_dim, rng))
        self._flat = filters * size * size

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        b = x.shape[0] if x.ndim == 4 else None
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.in_size, self.in_size):
            raise ShapeError(
                f"expected (b, {self.in_channels}, {self.in_size}, {self.in_size}) "
                f"input, got {x.shape}"
            )
        for i in range(4):
            x = self._children[f"conv{i}"](x)
            x = self._children[f"bn{i}"](x, train)
            if self.pooled[i]:
                x = T.maxpool2(x)
            x = T.leaky_relu(x)
        return self.fc(x.reshape(b, self._flat))


class VectorEmbedding(Module):
    """Conv blocks (conv3x3, batchnorm, leaky-relu) with no pooling, then a
    fully-connected layer over the conv features concatenated with the raw
    pixel grid.

    Meant for small images whose pixels carry independent signal (synthetic
    vector data reshaped to a grid). Max-pooling assumes neighboring pixels
    are redundant; on such data each 2x2 reduction discards information that
    no later layer can recover, so this stack keeps the full spatial extent,
    and the skip into the final layer lets the embedding stay close to an
    isometry of the input space where that is the best available metric.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int = 1,
        in_size: int = 8,
        filters: int = 32,
        embed_dim: int = 64,
        blocks: int = 1,
    ):
        super().__init__()
        self.in_channels, self.in_size = in_channels, in_size
        self.embed_dim = embed_dim
        self.n_blocks = blocks
        c = in_channels
        for i in range(blocks):
            self.register_child(f"conv{i}", Conv2d(c, filters, rng))
            self.register_child(f"bn{i}", BatchNorm(filters))
            c = filters
        self._raw = in_channels * in_size * in_size
        self._flat = filters * in_size * in_size + self._raw
        self.fc = self.register_child("fc", Linear(self._flat, embed_dim, rng))

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.in_size, self.in_size):
            raise ShapeError(
                f"expected (b, {self.in_channels}, {self.in_size}, {self.in_size}) "
                f"input, got {x.shape}"
            )
        b = x.shape[0]
        h = x
        for i in range(self.n_blocks):
            h = self._children[f"conv{i}"](h)
            h = self._children[f"bn{i}"](h, train)
            h = T.leaky_relu(h)
        h = T.concat([h.reshape(b, self._flat - self._raw), x.reshape(b, self._raw)], axis=1)
        return self.fc(h)


class MiniImagenetEmbedding(Module):
    """Five-layer 84x84 RGB embedding: conv widths 64/96/128/256 with
    dropout(0.5) after the last two blocks, then fc-128 plus batchnorm."""

    WIDTHS = (64, 96, 128, 256)

    def __init__(self, rng: np.random.Generator, embed_dim: int = 128):
        super().__init__()
        self.embed_dim = embed_dim
        c = 3
        for i, w in enumerate(self.WIDTHS):
            self.register_child(f"conv{i}", Conv2d(c, w, rng))
            self.register_child(f"bn{i}", BatchNorm(w))
            c = w
        self.drop = Dropout(0.5)
        self.fc = self.register_child("fc", Linear(256 * 5 * 5, embed_dim, rng))
        self.register_child("fc_bn", BatchNorm(embed_dim))

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (b, 3, 84, 84) input, got {x.shape}")
        if x.shape[2:] != (84, 84):
            raise ShapeError(f"expected 84x84 spatial extent, got {x.shape}")
        b = x.shape[0]
        for i in range(4):
            x = self._children[f"conv{i}"](x)
            x = self._children[f"bn{i}"](x, train)
            x = T.maxpool2(x)
            x = T.leaky_relu(x)
            if i >= 2:
                x = self.drop(x, train, rng)
        x = self.fc(x.reshape(b, 256 * 5 * 5))
        return self._children["fc_bn"](x, train)


def label_field(label: int | None, K: int) -> np.ndarray:
    """Point on the K-simplex: one-hot for a 1-based label, uniform for None."""
    if label is None:
        return np.full(K, 1.0 / K)
    if not 1 <= label <= K:
        raise ShapeError(f"label {label} outside 1..{K}")
    out = np.zeros(K)
    out[label - 1] = 1.0
    return out


@dataclass
class NodeFeatures:
    """x^(0) plus the episode layout the rest of the pipeline keys on."""

    x: Tensor  # (|V|, embed_dim + K)
    way: int
    embed_dim: int
    n_labeled: int
    n_unlabeled: int
    labels: list[int]  # 1-based, labeled nodes only

    @property
    def n_nodes(self) -> int:
        return self.n_labeled + self.n_unlabeled + 1

    @property
    def query_index(self) -> int:
        return self.n_nodes - 1

    @property
    def unlabeled_indices(self) -> list[int]:
        return list(range(self.n_labeled, self.n_labeled + self.n_unlabeled))


def init_nodes(
    episode: Episode,
    embedder: Module,
    train: bool,
    rng: np.random.Generator | None = None,
) -> NodeFeatures:
    """Build x^(0): rows ordered [labeled..., unlabeled..., query], each row
    the embedding concatenated with that node's label field."""
    K = episode.way
    images = [img for img, _ in episode.labeled] + list(episode.unlabeled) + [episode.query]
    batch = Tensor(np.stack(images))
    phi = embedder(batch, train, rng)

    labels = [lab for _, lab in episode.labeled]
    fields = np.stack(
        [label_field(lab, K) for lab in labels]
        + [label_field(None, K)] * (len(episode.unlabeled) + 1)
    )
    x0 = T.concat([phi, Tensor(fields)], axis=1)
    return NodeFeatures(
        x=x0,
        way=K,
        embed_dim=phi.shape[1],
        n_labeled=len(episode.labeled),
        n_unlabeled=len(episode.unlabeled),
        labels=labels,
    )
