"""Alternating optimization: momentum SGD on the backbone, EM on the leaves.

Every ``leaf_update_period`` SGD batches (counted globally across epochs) the
network is frozen, ``leaf_batch`` training samples are drawn, their leaf reach
probabilities computed once, and the Gaussian leaves re-estimated for
``leaf_iters`` iterations.  A period that is cut short by the end of training
simply never fires.
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import metrics
from .leaf_update import COV_EPS, MIN_MASS, LeafUpdateBatch, run_leaf_update
from .model import RNDF
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "batch", "loss", "lr", "train_mae", "val_mae", "val_cs"]


@dataclass
class TrainConfig:
    batch_size: int = 50
    leaf_update_period: int = 50
    leaf_batch: int = 500
    leaf_iters: int = 20
    lr: float = 0.5
    momentum: float = 0.9
    epochs: int = 30
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-3
    seed: int = 0
    # global-norm clip; None disables it
    grad_clip: Optional[float] = None
    # draw a fresh leaf batch for every leaf iteration instead of reusing one
    leaf_resample: bool = False
    # normalize responsibilities within each tree instead of the whole forest
    leaf_per_tree: bool = False
    # covariance jitter and minimum responsibility mass of the leaf update
    leaf_cov_eps: float = COV_EPS
    leaf_min_mass: float = MIN_MASS
    # divide the squared loss by the batch size ("mean") or not ("sum")
    loss_reduction: str = "mean"
    # scale network gradients by 1 / (training label variance), i.e. take SGD
    # steps as if labels were standardized
    normalize_targets: bool = True
    cs_threshold: float = 5.0

    def __post_init__(self):
        for name in ("batch_size", "leaf_update_period", "leaf_batch", "leaf_iters", "epochs",
                     "plateau_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.leaf_cov_eps <= 0 or self.leaf_min_mass < 0:
            raise ValueError("leaf_cov_eps must be positive and leaf_min_mass non-negative")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    plateau_counter: int = 0
    best_mae: float = float("inf")


def sgd_step(params, grads: Dict[str, np.ndarray], opt: OptimizerState) -> None:
    """In-place momentum update ``v <- m v + g``, ``theta <- theta - lr v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in {name!r} ({bad} entries, lr={opt.lr})")
    for name, g in grads.items():
        p = params[name]
        data = p.data if isinstance(p, Tensor) else p
        v = opt.velocity.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.velocity[name] = v
        data -= opt.lr * v


def clip_grads(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def lr_plateau(opt: OptimizerState, val_mae: float, patience: int = 3, min_delta: float = 1e-3) -> float:
    """Halve the learning rate after ``patience`` calls without improvement."""
    if val_mae < opt.best_mae - min_delta:
        opt.best_mae = val_mae
        opt.plateau_counter = 0
    else:
        opt.plateau_counter += 1
        if opt.plateau_counter >= patience:
            opt.lr /= 2.0
            opt.plateau_counter = 0
            logger.info("plateau: learning rate halved to %g", opt.lr)
    return opt.lr


def evaluate(model: RNDF, data, threshold: float = 5.0, batch_size: int = 500) -> Tuple[float, float]:
    """MAE and cumulative score (``|error| <= threshold``) in eval mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds, labels = [], []
    for start in range(0, len(data), batch_size):
        x, y = data.batch(np.arange(start, min(start + batch_size, len(data))), train=False)
        preds.append(model.predict(x))
        labels.append(y)
    preds, labels = np.concatenate(preds), np.concatenate(labels)
    err = metrics.absolute_errors(preds, labels)
    return float(err.mean()), metrics.cumulative_score(err, threshold)


def leaf_reach(model: RNDF, x, batch_size: int = 1000) -> np.ndarray:
    return np.concatenate([model.route(x[i:i + batch_size]).leaf_weights
                           for i in range(0, len(x), batch_size)])


class Trainer:
    """Owns the model, optimizer state and RNG stream for one training run."""

    def __init__(self, model: RNDF, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.opt = OptimizerState(lr=cfg.lr, momentum=cfg.momentum)
        self.rng = np.random.default_rng(cfg.seed)
        self.batches_done = 0
        self.leaf_updates = 0
        self.epoch = 0
        self.nll_traces: List[List[float]] = []
        self.grad_weight = 1.0
        # test hooks: called as hook(trainer) around each step kind
        self.on_sgd_step = None
        self.on_leaf_update = None

    def update_leaves(self, data) -> None:
        cfg = self.cfg
        n = min(cfg.leaf_batch, len(data))

        def draw():
            idx = np.sort(self.rng.choice(len(data), size=n, replace=False))
            x, y = data.batch(idx, self.rng, train=True)
            return LeafUpdateBatch(y, leaf_reach(self.model, x))

        opts = dict(per_tree=cfg.leaf_per_tree, cov_eps=cfg.leaf_cov_eps, min_mass=cfg.leaf_min_mass)
        if cfg.leaf_resample:
            leaves, trace = self.model.leaves, []
            for _ in range(cfg.leaf_iters):
                leaves, t = run_leaf_update(leaves, draw(), 1, **opts)
                trace.extend(t if not trace else t[1:])
        else:
            leaves, trace = run_leaf_update(self.model.leaves, draw(), cfg.leaf_iters, **opts)
        self.model.leaves = leaves
        self.leaf_updates += 1
        self.nll_traces.append(trace)
        if self.on_leaf_update is not None:
            self.on_leaf_update(self)

    def train_epoch(self, data) -> Dict[str, float]:
        """One pass over shuffled batches; returns mean loss and MAE."""
        if len(data) == 0:
            raise ValueError("cannot train on an empty dataset")
        cfg = self.cfg
        params = self.model.parameters()
        if cfg.normalize_targets and self.epoch == 0 and self.batches_done == 0:
            var = float(np.mean(np.var(data.labels, axis=0)))
            self.grad_weight = 1.0 / var if var > 0 else 1.0
        perm = self.rng.permutation(len(data))
        losses, errs, counts = [], [], []
        for start in range(0, len(data), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = data.batch(idx, self.rng, train=True)
            loss, P, grads = self.model.loss_and_grad(x, y, reduction=cfg.loss_reduction,
                                                     weight=self.grad_weight)
            if cfg.grad_clip is not None:
                clip_grads(grads, cfg.grad_clip)
            sgd_step(params, grads, self.opt)
            self.batches_done += 1
            losses.append(loss)
            errs.append(float(metrics.absolute_errors(P, y).sum()))
            counts.append(len(idx))
            if self.on_sgd_step is not None:
                self.on_sgd_step(self)
            if self.batches_done % cfg.leaf_update_period == 0:
                self.update_leaves(data)
        self.epoch += 1
        weights = np.asarray(counts, dtype=np.float64)
        return {"loss": float(np.average(losses, weights=weights)),
                "mae": float(np.sum(errs) / np.sum(weights))}

    def fit(self, train, val=None, log_path: Optional[str] = None, checkpoint_fn=None) -> List[dict]:
        """Run ``cfg.epochs`` epochs; log one CSV row per epoch.

        ``checkpoint_fn(trainer, is_best)`` is called after every epoch.
        """
        rows = []
        best = float("inf")
        fh = open(log_path, "w", newline="") if log_path else None
        try:
            writer = csv.writer(fh, lineterminator="\n") if fh else None
            if writer:
                writer.writerow(METRIC_COLUMNS)
            for _ in range(self.cfg.epochs):
                lr_used = self.opt.lr
                stats = self.train_epoch(train)
                val_mae, val_cs = evaluate(self.model, val if val is not None else train,
                                           self.cfg.cs_threshold)
                is_best = val_mae < best
                best = min(best, val_mae)
                lr_plateau(self.opt, val_mae, self.cfg.plateau_patience, self.cfg.plateau_min_delta)
                row = {"epoch": self.epoch, "batch": self.batches_done, "loss": stats["loss"],
                       "lr": lr_used, "train_mae": stats["mae"], "val_mae": val_mae, "val_cs": val_cs}
                rows.append(row)
                logger.info("epoch %d loss %.4f train_mae %.4f val_mae %.4f val_cs %.4f lr %g",
                            self.epoch, stats["loss"], stats["mae"], val_mae, val_cs, lr_used)
                if writer:
                    writer.writerow([row[c] if c in ("epoch", "batch") else repr(float(row[c]))
                                     for c in METRIC_COLUMNS])
                    fh.flush()
                if checkpoint_fn is not None:
                    checkpoint_fn(self, is_best)
        finally:
            if fh:
                fh.close()
        return rows
