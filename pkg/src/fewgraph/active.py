"""Active label querying: pick one unlabeled node mid-forward and reveal its
label, scaled by the attention weight that chose it.

The scorer g maps each unlabeled node's post-block-1 features to a scalar;
softmax over those scalars is the attention. Training samples the node from
the attention (and test time takes the argmax), but the gradient path is the
weight w alone: the chosen index is a constant of the trace, and w multiplies
the revealed one-hot label summed onto the node's carried label field.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .episodes import ProtocolError
from .nn import MLP
from .tensor import Tensor


def score_unlabeled(x1: Tensor, unlabeled_indices: list[int], scorer: MLP) -> Tensor:
    """Attention row (1 x r) over the unlabeled nodes."""
    r = len(unlabeled_indices)
    if r == 0:
        raise ProtocolError("active query needs at least one unlabeled node")
    rows = T.gather_rows(x1, unlabeled_indices)
    return T.softmax_rows(scorer(rows).reshape(1, r))


def select_one(
    attention: Tensor, mode: str, rng: np.random.Generator | None = None
) -> tuple[int, Tensor]:
    """Zero out all but one attention entry.

    Training samples the index from the attention distribution; test time
    takes the argmax, breaking ties toward the lowest index. The returned
    weight is the surviving attention entry, still attached to the trace.
    """
    if mode not in ("train", "test"):
        raise ProtocolError(f"unknown selection mode {mode!r}")
    probs = attention.data.reshape(-1)
    if mode == "train":
        if rng is None:
            raise ProtocolError("train-mode selection needs an rng")
        i_star = int(rng.choice(probs.size, p=probs / probs.sum()))
    else:
        i_star = int(np.argmax(probs))
    w = T.gather_rows(attention.reshape(probs.size, 1), [i_star])
    return i_star, w


def inject_label(
    x1: Tensor,
    node_index: int,
    unlabeled_indices: list[int],
    w: Tensor,
    label: int,
    label_offset: int,
    way: int,
) -> Tensor:
    """Sum w * h(label) onto node_index's carried label field inside x1.

    label_offset is the column where the K label-field coordinates start
    (after the dense concatenation, nf + embed_dim from the left). Only the
    chosen node changes; the revealed one-hot touches a single column.
    """
    if node_index not in unlabeled_indices:
        raise ProtocolError(f"node {node_index} is not an unlabeled node")
    if not 1 <= label <= way:
        raise ProtocolError(f"label {label} outside 1..{way}")
    col = label_offset + (label - 1)
    if not 0 <= col < x1.shape[1]:
        raise ProtocolError(f"label column {col} outside feature width {x1.shape[1]}")
    delta = T.scatter_add_2d(w.reshape(1), [node_index], [col], x1.shape)
    return x1 + delta
