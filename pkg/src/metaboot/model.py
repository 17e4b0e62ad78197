"""Task network and the inner-loop objective.

The network is three heads over a shared two-layer tanh feature extractor:
a projection head whose output is row L2-normalized (contrastive term) and
a linear classifier with one output per pseudo-class (cross-entropy term).
The episodic loss is

    loss = ce + lambda * cl

where ``ce`` is mean negative log softmax probability of the true
pseudo-label and ``cl`` is a multi-positive normalized-temperature
contrastive loss on cosine similarities: for each anchor view,
-log( sum_pos exp(s/tau) / sum_nonself exp(s/tau) ), averaged over anchors.
Positives are other views of the anchor's source image; every view of a
different source is a negative.

Everything here builds graph nodes; numeric values appear only when a graph
is evaluated. Functions are pure, so episodes can be processed in parallel
as long as each owns its graph.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .augment import Image
from .errors import ValidationError
from .graph import ExprGraph
from .rng import generator
from .taskgen import Episode
from .tensor import Tensor

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wp", "bp", "Wc", "bc")


class ParamSet(Mapping):
    """Named, ordered collection of tensors; doubles as theta and task weights."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors = {k: v if isinstance(v, Tensor) else Tensor(v)
                         for k, v in tensors.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}

    @property
    def dim(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.data.reshape(-1) for v in self._tensors.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValidationError(f"expected flat vector of length {self.dim}")
        out, offset = {}, 0
        for name, t in self._tensors.items():
            out[name] = Tensor(vec[offset:offset + t.size].reshape(t.shape))
            offset += t.size
        return ParamSet(out)

    def updated(self, grads: Mapping[str, object], lr: float) -> "ParamSet":
        """One plain SGD step: w - lr * grad, per named tensor."""
        out = {}
        for name, t in self._tensors.items():
            gv = grads[name]
            g = gv.data if isinstance(gv, Tensor) else np.asarray(gv)
            out[name] = Tensor(t.data - lr * g)
        return ParamSet(out)


def init_params(input_dim: int, hidden_dim: int, proj_dim: int, way: int,
                seed: int) -> ParamSet:
    """Seeded Gaussian init, scaled by fan-in; biases start at zero."""
    rng = generator(seed)
    def dense(i, o):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(i), size=(i, o)))
    return ParamSet({
        "W1": dense(input_dim, hidden_dim), "b1": Tensor(np.zeros((1, hidden_dim))),
        "W2": dense(hidden_dim, hidden_dim), "b2": Tensor(np.zeros((1, hidden_dim))),
        "Wp": dense(hidden_dim, proj_dim), "bp": Tensor(np.zeros((1, proj_dim))),
        "Wc": dense(hidden_dim, way), "bc": Tensor(np.zeros((1, way))),
    })


def zero_params_like(params: ParamSet) -> ParamSet:
    return ParamSet({k: Tensor(np.zeros(v.shape)) for k, v in params.items()})


def register_param_leaves(graph: ExprGraph, params: ParamSet) -> dict[str, int]:
    return {name: graph.leaf(name, t.shape) for name, t in params.items()}


def views_matrix(views) -> np.ndarray:
    """Stack images (or (image, label) pairs) into an (m, height*width) matrix."""
    rows = []
    for v in views:
        img = v[0] if isinstance(v, tuple) else v
        rows.append(img.vector())
    return np.stack(rows)


def view_labels(views) -> np.ndarray:
    return np.asarray([int(lbl) for _, lbl in views], dtype=np.int64)


@dataclass(frozen=True)
class EpisodeTensors:
    """Numeric form of one episode, ready to feed a graph."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way: int

    @classmethod
    def from_episode(cls, episode: Episode) -> "EpisodeTensors":
        return cls(views_matrix(episode.support), view_labels(episode.support),
                   views_matrix(episode.query), view_labels(episode.query),
                   episode.way)


@dataclass(frozen=True)
class ModelOutputs:
    """Node ids of the three network heads for one batch of views."""

    features: int
    projections: int
    logits: int


def forward_nodes(graph: ExprGraph, params: Mapping[str, int], views_node: int,
                  activation: str = "tanh") -> ModelOutputs:
    """Network forward pass over already-registered parameter nodes."""
    act = graph.tanh if activation == "tanh" else graph.relu
    h1 = act(graph.add(graph.matmul(views_node, params["W1"]), params["b1"]))
    h2 = act(graph.add(graph.matmul(h1, params["W2"]), params["b2"]))
    proj = graph.l2normalize(graph.add(graph.matmul(h2, params["Wp"]), params["bp"]))
    logits = graph.add(graph.matmul(h2, params["Wc"]), params["bc"])
    return ModelOutputs(h2, proj, logits)


def forward(params: ParamSet, views: list[Image], graph: ExprGraph,
            activation: str = "tanh") -> ModelOutputs:
    """Spec-shaped forward: parameters enter the graph as constants."""
    nodes = {k: graph.const(v.data) for k, v in params.items()}
    x = graph.const(views_matrix(views))
    if views_matrix(views).shape[1] != params["W1"].shape[0]:
        raise ValidationError("view dimension does not match extractor input")
    return forward_nodes(graph, nodes, x, activation)


def one_hot(labels: np.ndarray, way: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= way:
        raise ValidationError(f"labels must lie in [0,{way})")
    out = np.zeros((labels.size, way))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_ce(graph: ExprGraph, logits: int, labels: np.ndarray) -> int:
    """Mean negative log softmax probability of the true pseudo-label."""
    m, way = graph.nodes[logits].shape
    hot = graph.const(one_hot(labels, way))
    picked = graph.sum(graph.mul(hot, graph.log_softmax(logits)))
    return graph.scale(picked, -1.0 / m)


def _pair_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(labels.size, dtype=bool)
    return (same & ~eye).astype(np.float64), (~eye).astype(np.float64)


def loss_cl(graph: ExprGraph, projections: int, labels: np.ndarray,
            tau: float) -> int:
    """Multi-positive contrastive loss over cosine similarities."""
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels)
    lonely = np.nonzero(counts == 1)[0]
    if lonely.size:
        raise ValidationError(
            f"label(s) {lonely.tolist()} have a single view: no positive pair")
    m = graph.nodes[projections].shape[0]
    if m != labels.size:
        raise ValidationError("one label per projection row required")
    pos_mask, nonself_mask = _pair_masks(labels)
    sims = graph.matmul(projections, graph.transpose(projections))
    e = graph.exp(graph.scale(sims, 1.0 / tau))
    pos = graph.rowsum(graph.mul(e, graph.const(pos_mask)))
    denom = graph.rowsum(graph.mul(e, graph.const(nonself_mask)))
    per_anchor = graph.sub(graph.log(pos), graph.log(denom))
    return graph.scale(graph.sum(per_anchor), -1.0 / m)


def loss_total_nodes(graph: ExprGraph, params: Mapping[str, int], views_node: int,
                     labels: np.ndarray, lam: float, tau: float,
                     activation: str = "tanh") -> int:
    """ce + lambda*cl on one set of views; lambda == 0 skips the contrastive term."""
    out = forward_nodes(graph, params, views_node, activation)
    ce = loss_ce(graph, out.logits, labels)
    if lam == 0.0:
        return ce
    cl = loss_cl(graph, out.projections, labels, tau)
    return graph.add(ce, graph.scale(cl, lam))


def loss_total(params: ParamSet, views_with_labels, lam: float, tau: float,
               graph: ExprGraph) -> int:
    """Spec-shaped composite loss over (image, label) pairs, params as leaves."""
    nodes = register_param_leaves(graph, params)
    x = graph.const(views_matrix(views_with_labels))
    return loss_total_nodes(graph, nodes, x, view_labels(views_with_labels),
                            lam, tau)


def predictive_nodes(graph: ExprGraph, params: Mapping[str, int],
                     views_node: int, activation: str = "tanh") -> int:
    """Per-view class probabilities: softmax of the classifier logits."""
    return graph.softmax(forward_nodes(graph, params, views_node, activation).logits)


def predictive_distribution(params: ParamSet, views: list[Image],
                            graph: ExprGraph) -> int:
    nodes = {k: graph.const(v.data) for k, v in params.items()}
    return predictive_nodes(graph, nodes, graph.const(views_matrix(views)))
