"""Decision saliency maps: input gradients of routing probabilities.

For one input, the heaviest root-to-leaf path of the forest is traced and the
gradient of each splitting node's probability ``s_i`` with respect to the
(pre-pool, preprocessed) input is computed.  Multi-channel gradients are
collapsed per pixel by the maximum absolute value.
"""
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import forest as F
from .data import quantize, write_pnm
from .model import RNDF
from .tensor import Tensor, backward, sigmoid


@dataclass
class SaliencyResult:
    tree: int
    leaf: int
    path_weight: float
    nodes: List[int]
    scores: List[float]
    goes_left: List[bool]
    maps: List[np.ndarray]
    raw_gradients: List[np.ndarray]
    prediction: Optional[List[float]] = None
    ground_truth: Optional[List[float]] = None
    files: List[str] = field(default_factory=list)

    @property
    def branch_probs(self) -> List[float]:
        """Probability of the branch actually taken at each node."""
        return [s if left else 1.0 - s for s, left in zip(self.scores, self.goes_left)]

    @property
    def arrival_probs(self) -> List[float]:
        """Probability of reaching each node on the path."""
        out, acc = [], 1.0
        for p in self.branch_probs:
            out.append(acc)
            acc *= p
        return out


def _reduce_channels(grad: np.ndarray) -> np.ndarray:
    if grad.ndim == 3:
        if grad.shape[0] == 1:
            return grad[0]
        return np.abs(grad).max(axis=0)
    return grad


def _check_node(model: RNDF, tree: int, node: int) -> None:
    cfg = model.forest_cfg
    if not 0 <= tree < cfg.num_trees:
        raise ValueError(f"tree {tree} out of range (forest has {cfg.num_trees})")
    if not 0 <= node < cfg.num_splits:
        raise ValueError(f"splitting node {node} out of range (tree has {cfg.num_splits})")


def _score_graph(model: RNDF, x):
    xt = Tensor(np.asarray(x, dtype=np.float64)[None], requires_grad=True)
    return xt, sigmoid(model.logits(xt))


def _node_gradient(model: RNDF, xt: Tensor, s: Tensor, tree: int, node: int) -> np.ndarray:
    onehot = np.zeros(s.shape)
    onehot[0, tree * model.forest_cfg.num_splits + node] = 1.0
    backward((s * Tensor(onehot)).sum())
    return xt.grad[0].copy()


def dsm_raw(model: RNDF, x, node: int, tree: int = 0) -> np.ndarray:
    """Gradient of ``s_node`` w.r.t. a single input ``x`` (same shape as ``x``)."""
    _check_node(model, tree, node)
    xt, s = _score_graph(model, x)
    return _node_gradient(model, xt, s, tree, node)


def dsm(model: RNDF, x, node: int, tree: int = 0) -> np.ndarray:
    """Saliency map of one splitting node, channel-reduced for images."""
    return _reduce_channels(dsm_raw(model, x, node, tree))


def trace_dsm_sequence(model: RNDF, x, ground_truth=None) -> SaliencyResult:
    x = np.asarray(x, dtype=np.float64)
    xt, s = _score_graph(model, x)
    scores = np.clip(s.data, F.SIGMOID_EPS, 1.0 - F.SIGMOID_EPS).reshape(
        1, model.forest_cfg.num_trees, model.forest_cfg.num_splits)
    weights = F.leaf_weights(scores)
    tree, leaf, _ = F.max_weight_leaf(weights[0])
    path = F.leaf_path(model.forest_cfg.depth, leaf)
    raws = [_node_gradient(model, xt, s, tree, node) for node, _ in path]
    pred = F.forest_predict(weights, model.leaves)[0]
    gt = None if ground_truth is None else [float(v) for v in np.atleast_1d(ground_truth)]
    return SaliencyResult(
        tree=tree, leaf=leaf, path_weight=float(weights[0, tree, leaf]),
        nodes=[n for n, _ in path],
        scores=[float(scores[0, tree, n]) for n, _ in path],
        goes_left=[bool(left) for _, left in path],
        maps=[_reduce_channels(g) for g in raws], raw_gradients=raws,
        prediction=[float(v) for v in pred], ground_truth=gt)


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to ``[0, 1]``; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def map_filename(node: int, prob: float) -> str:
    return f"node{node}_s{prob:.4f}.pgm"


def export_maps(result: SaliencyResult, out_dir: str) -> List[str]:
    """Write one 8-bit PGM per path node plus ``trace.json``; returns the image paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for node, prob, m in zip(result.nodes, result.scores, result.maps):
        img = normalize_map(m)
        if img.ndim == 1:
            img = img[None]
        path = os.path.join(out_dir, map_filename(node, prob))
        write_pnm(path, quantize(img))
        paths.append(path)
    result.files = [os.path.basename(p) for p in paths]
    sidecar = {
        "tree": result.tree,
        "leaf": result.leaf,
        "path_weight": result.path_weight,
        "nodes": result.nodes,
        "probs": result.scores,
        "goes_left": result.goes_left,
        "branch_probs": result.branch_probs,
        "arrival_probs": result.arrival_probs,
        "prediction": result.prediction,
        "ground_truth": result.ground_truth,
        "files": result.files,
    }
    with open(os.path.join(out_dir, "trace.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
    return paths
