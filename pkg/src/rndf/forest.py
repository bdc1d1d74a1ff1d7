"""Soft-routing regression forest on top of backbone logits.

Trees are full binary trees indexed breadth-first (root 0, children of ``i``
at ``2i+1`` and ``2i+2``).  A tree of depth ``d`` has ``2**d - 1`` splitting
nodes and ``2**d`` leaves; leaves are numbered 0..2**d-1 left to right.
Splitting node ``i`` of tree ``t`` reads logit column ``t * (2**d - 1) + i``.

Array conventions (numpy, float64):

* scores  ``(batch, num_trees, num_splits)`` -- probability of going left
* weights ``(batch, num_trees, num_leaves)`` -- path probabilities
* leaf predictions ``(num_trees, num_leaves, k)``
* leaf covariances ``(num_trees, num_leaves, k, k)``
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .tensor import SIGMOID_EPS, DimensionError, Tensor, _sigmoid, as_tensor, scale, sigmoid


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 5
    depth: int = 6
    prediction_dim: int = 1

    def __post_init__(self):
        if self.num_trees < 1 or self.depth < 1 or self.prediction_dim < 1:
            raise ValueError("num_trees, depth and prediction_dim must be positive")

    @property
    def num_splits(self) -> int:
        return 2 ** self.depth - 1

    @property
    def num_leaves(self) -> int:
        return 2 ** self.depth

    @property
    def num_split_outputs(self) -> int:
        return self.num_trees * self.num_splits


@dataclass
class LeafParams:
    predictions: np.ndarray
    covariances: np.ndarray

    def copy(self) -> "LeafParams":
        return LeafParams(self.predictions.copy(), self.covariances.copy())

    def min_eigenvalue(self) -> float:
        cov = self.covariances
        k = cov.shape[-1]
        sym = np.allclose(cov, np.swapaxes(cov, -1, -2), rtol=0, atol=1e-12)
        if not sym:
            return -np.inf
        return float(np.linalg.eigvalsh(cov.reshape(-1, k, k)).min())


@dataclass
class RoutingState:
    scores: np.ndarray
    leaf_weights: np.ndarray


def node_level(node: int) -> int:
    return int(np.floor(np.log2(node + 1)))


def leaf_path(depth: int, leaf: int) -> List[Tuple[int, bool]]:
    """Root-to-leaf list of ``(split node, goes_left)``."""
    node = leaf + 2 ** depth - 1
    path = []
    while node > 0:
        parent = (node - 1) // 2
        path.append((parent, node == 2 * parent + 1))
        node = parent
    return path[::-1]


def init_leaves(cfg: ForestConfig, labels: np.ndarray, rng: np.random.Generator) -> LeafParams:
    """Means uniform over the label range, covariance ``diag((range / 4)**2)``."""
    labels = np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)
    if labels.shape[1] != cfg.prediction_dim:
        raise DimensionError(f"labels have width {labels.shape[1]}, forest expects {cfg.prediction_dim}")
    lo, hi = labels.min(axis=0), labels.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    preds = rng.uniform(lo, lo + span, size=(cfg.num_trees, cfg.num_leaves, cfg.prediction_dim))
    cov = np.diag((span / 4.0) ** 2)
    covs = np.broadcast_to(cov, (cfg.num_trees, cfg.num_leaves) + cov.shape).copy()
    return LeafParams(preds, covs)


# ---------------------------------------------------------------------------
# numpy routing
# ---------------------------------------------------------------------------

def routing_scores(logits, cfg: ForestConfig, eps: float = SIGMOID_EPS) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cfg.num_split_outputs:
        raise DimensionError(f"expected logits (batch, {cfg.num_split_outputs}), got {z.shape}")
    s = np.clip(_sigmoid(z), eps, 1.0 - eps)
    return s.reshape(z.shape[0], cfg.num_trees, cfg.num_splits)


def leaf_weights(scores: np.ndarray) -> np.ndarray:
    """Path probabilities: product of ``s`` on left turns and ``1 - s`` on right turns."""
    scores = np.asarray(scores, dtype=np.float64)
    batch, trees, splits = scores.shape
    depth = int(round(np.log2(splits + 1)))
    if 2 ** depth - 1 != splits:
        raise DimensionError(f"{splits} splitting nodes is not a full binary tree")
    mu = np.ones((batch, trees, 1))
    for level in range(depth):
        s = scores[:, :, 2 ** level - 1: 2 ** (level + 1) - 1]
        mu = np.stack([mu * s, mu * (1.0 - s)], axis=-1).reshape(batch, trees, 2 ** (level + 1))
    return mu


def route(logits, cfg: ForestConfig) -> RoutingState:
    s = routing_scores(logits, cfg)
    return RoutingState(s, leaf_weights(s))


def forest_predict(weights: np.ndarray, leaves: LeafParams) -> np.ndarray:
    """Tree-averaged convex combination of leaf predictions, ``(batch, k)``."""
    num_trees = weights.shape[1]
    return np.einsum("btl,tlk->bk", weights, leaves.predictions) / num_trees


def squared_loss(P, y) -> float:
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if P.shape != y.shape:
        raise DimensionError(f"prediction {P.shape} and target {y.shape} differ")
    return 0.5 * float(np.sum((P - y) ** 2))


def grad_scores(P, y, weights, leaves: LeafParams, scores, reduce: bool = False) -> np.ndarray:
    """Analytic derivative of the squared loss with respect to every score.

    For node ``i`` and sample ``t`` the contribution is
    ``(P_t - y_t) . (A_left / s_i - A_right / (1 - s_i)) / num_trees`` where
    ``A_left`` (``A_right``) sums ``w_j p_j`` over leaves in the left (right)
    subtree.  Returns per-sample values ``(batch, trees, splits)`` or, with
    ``reduce=True``, their batch sum.
    """
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    batch, trees, leaves_n = weights.shape
    depth = int(round(np.log2(leaves_n)))
    k = leaves.predictions.shape[-1]
    resid = P - y
    contrib = weights[..., None] * leaves.predictions[None]
    out = np.empty_like(scores)
    for level in range(depth):
        halves = contrib.reshape(batch, trees, 2 ** level, 2, 2 ** (depth - level - 1), k).sum(axis=4)
        a_left, a_right = halves[:, :, :, 0], halves[:, :, :, 1]
        s = scores[:, :, 2 ** level - 1: 2 ** (level + 1) - 1]
        dP = a_left / s[..., None] - a_right / (1.0 - s[..., None])
        out[:, :, 2 ** level - 1: 2 ** (level + 1) - 1] = np.einsum("bk,btqk->btq", resid, dP)
    out /= trees
    return out.sum(axis=0) if reduce else out


def max_weight_leaf(weights: np.ndarray) -> Tuple[int, int, List[int]]:
    """Heaviest leaf of one sample's ``(trees, leaves)`` weights.

    Ties go to the smallest ``(tree, leaf)`` pair.
    """
    weights = np.asarray(weights)
    if weights.ndim == 3:
        if weights.shape[0] != 1:
            raise DimensionError("max_weight_leaf takes a single sample")
        weights = weights[0]
    tree, leaf = np.unravel_index(int(np.argmax(weights)), weights.shape)
    depth = int(round(np.log2(weights.shape[1])))
    return int(tree), int(leaf), [node for node, _ in leaf_path(depth, int(leaf))]


# ---------------------------------------------------------------------------
# tape path: the same prediction built from engine ops only
# ---------------------------------------------------------------------------

def forest_predict_tensor(logits: Tensor, leaves: LeafParams, cfg: ForestConfig,
                          scores: Optional[Tensor] = None) -> Tensor:
    """Differentiable forest prediction built from matmul / mul / add.

    Column selection and child duplication are expressed as constant 0/1
    matrices so the engine needs no gather kernel.  Pass ``scores`` to route
    from precomputed (possibly unclamped) probabilities instead of logits.
    """
    s = sigmoid(as_tensor(logits)) if scores is None else scores
    ns, d = cfg.num_splits, cfg.depth
    total = None
    for t in range(cfg.num_trees):
        mu = Tensor(np.ones((s.shape[0], 1)))
        for level in range(d):
            width = 2 ** level
            dup = np.zeros((width, 2 * width))
            dup[np.arange(width), 2 * np.arange(width)] = 1.0
            dup[np.arange(width), 2 * np.arange(width) + 1] = 1.0
            pick = np.zeros((cfg.num_split_outputs, width))
            pick[t * ns + width - 1 + np.arange(width), np.arange(width)] = 1.0
            s_rep = s @ Tensor(pick @ dup)
            sign = np.tile([1.0, -1.0], width)
            right = np.tile([0.0, 1.0], width)
            mu = (mu @ Tensor(dup)) * (s_rep * Tensor(sign) + Tensor(right))
        tree_pred = mu @ Tensor(leaves.predictions[t])
        total = tree_pred if total is None else total + tree_pred
    return scale(total, 1.0 / cfg.num_trees)


def squared_loss_tensor(P: Tensor, y) -> Tensor:
    y = as_tensor(y)
    if P.shape != y.shape:
        raise DimensionError(f"prediction {P.shape} and target {y.shape} differ")
    diff = P - y
    return scale((diff * diff).sum(), 0.5)
