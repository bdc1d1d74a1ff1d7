"""Residual neural decision forest: backbone + soft trees + Gaussian leaves."""
from typing import Dict, Optional, Tuple

import numpy as np

from . import forest as F
from .backbone import Backbone, BackboneConfig, backbone_init
from .tensor import Tensor, _sigmoid, backward


class RNDF:
    """A trained or trainable model.

    ``preprocess`` optionally carries the image normalization settings the
    model was trained with, so a checkpoint can be evaluated stand-alone.
    """

    def __init__(self, backbone: Backbone, forest_cfg: F.ForestConfig, leaves: F.LeafParams,
                 preprocess: Optional[dict] = None):
        if backbone.cfg.num_split_outputs != forest_cfg.num_split_outputs:
            raise ValueError(
                f"backbone emits {backbone.cfg.num_split_outputs} logits but the forest has "
                f"{forest_cfg.num_trees} x {forest_cfg.num_splits} = {forest_cfg.num_split_outputs} splitting nodes")
        expected = (forest_cfg.num_trees, forest_cfg.num_leaves, forest_cfg.prediction_dim)
        if leaves.predictions.shape != expected:
            raise ValueError(f"leaf predictions {leaves.predictions.shape} != {expected}")
        self.backbone = backbone
        self.forest_cfg = forest_cfg
        self.leaves = leaves
        self.preprocess = preprocess

    @classmethod
    def create(cls, backbone_cfg: BackboneConfig, forest_cfg: F.ForestConfig, labels,
               seed: int = 0, preprocess: Optional[dict] = None) -> "RNDF":
        rng = np.random.default_rng(seed)
        leaves = F.init_leaves(forest_cfg, labels, rng)
        return cls(backbone_init(backbone_cfg), forest_cfg, leaves, preprocess)

    def parameters(self) -> Dict[str, Tensor]:
        return self.backbone.params

    def logits(self, x) -> Tensor:
        return self.backbone(x)

    def route(self, x) -> F.RoutingState:
        return F.route(self.backbone(x), self.forest_cfg)

    def predict(self, x, batch_size: int = 1000) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [F.forest_predict(self.route(x[i:i + batch_size]).leaf_weights, self.leaves)
               for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.forest_cfg.prediction_dim))
        return np.concatenate(out, axis=0)

    def loss_and_grad(self, x, y, reduction: str = "mean",
                      weight: float = 1.0) -> Tuple[float, np.ndarray, Dict[str, np.ndarray]]:
        """Squared loss and backbone gradients with the leaves held fixed.

        The analytic score gradient is pushed through the sigmoid and injected
        at the logit layer as the seed of a scalar surrogate
        ``sum(logits * dL/dlogits)``, whose tape gradient equals the true one.
        ``reduction='mean'`` divides loss and gradients by the batch size;
        ``weight`` further scales the gradients only (not the returned loss).
        Returns ``(loss, predictions, grads)``.
        """
        y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
        logits = self.backbone(x)
        state = F.route(logits, self.forest_cfg)
        P = F.forest_predict(state.leaf_weights, self.leaves)
        norm = float(len(y)) if reduction == "mean" else 1.0
        loss = F.squared_loss(P, y) / norm
        g_s = F.grad_scores(P, y, state.leaf_weights, self.leaves, state.scores) * (weight / norm)
        s_raw = _sigmoid(logits.data)
        g_logits = g_s.reshape(logits.shape) * s_raw * (1.0 - s_raw)
        backward((logits * Tensor(g_logits)).sum())
        grads = {name: p.grad for name, p in self.backbone.params.items()}
        return loss, P, grads

    def loss_tensor(self, x, y, reduction: str = "mean") -> Tensor:
        """Same loss built entirely on the tape (reference path for checks)."""
        y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
        P = F.forest_predict_tensor(self.backbone(x), self.leaves, self.forest_cfg)
        loss = F.squared_loss_tensor(P, y)
        return loss * (1.0 / len(y)) if reduction == "mean" else loss
