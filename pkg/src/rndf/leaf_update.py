"""Closed-form Gaussian leaf updates with the network frozen.

Each leaf holds a Gaussian (mean ``p_j``, covariance ``Sigma_j``).  One
iteration computes responsibilities

    zeta_j(t) = reach_j(t) N(y_t; p_j, Sigma_j) / sum_i reach_i(t) N(y_t; p_i, Sigma_i)

at the current parameters and re-estimates every leaf as the
zeta-weighted mean and scatter of the labels.  This is an EM step for a
mixture with fixed, sample-dependent mixing weights, so the negative
log-likelihood reported by :func:`forest_nll` does not increase.
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.special import logsumexp

from .forest import LeafParams

COV_EPS = 1e-6
MIN_MASS = 1e-12


@dataclass
class LeafUpdateBatch:
    """Labels ``(N, k)`` and leaf reach probabilities ``(N, trees, leaves)``."""
    labels: np.ndarray
    leaf_reach: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        self.leaf_reach = np.asarray(self.leaf_reach, dtype=np.float64)
        if self.leaf_reach.ndim != 3 or self.leaf_reach.shape[0] != self.labels.shape[0]:
            raise ValueError(f"leaf_reach must be (N, trees, leaves) with N={self.labels.shape[0]}")
        if np.any(self.leaf_reach < 0):
            raise ValueError("leaf_reach must be non-negative")


def log_gaussian_density(y: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Log densities of every label under every leaf.

    ``y`` is ``(N, k)``, ``means`` is ``(..., k)``, ``covs`` is ``(..., k, k)``;
    the result is ``(N, ...)``.  Raises ``numpy.linalg.LinAlgError`` if any
    covariance is not positive definite.
    """
    k = y.shape[-1]
    chol = np.linalg.cholesky(covs)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    diff = y.reshape((y.shape[0],) + (1,) * (means.ndim - 1) + (k,)) - means[None]
    chol_inv = np.linalg.inv(chol)
    z = np.einsum("...km,n...m->n...k", chol_inv, diff)
    maha = np.sum(z * z, axis=-1)
    return -0.5 * (k * np.log(2.0 * np.pi) + logdet[None] + maha)


def gaussian_density(y, p, sigma) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    return float(np.exp(log_gaussian_density(y[None], p, sigma)[0]))


def _log_joint(state: LeafParams, batch: LeafUpdateBatch) -> np.ndarray:
    logdens = log_gaussian_density(batch.labels, state.predictions, state.covariances)
    with np.errstate(divide="ignore"):
        return np.log(batch.leaf_reach) + logdens


def zeta(state: LeafParams, batch: LeafUpdateBatch, per_tree: bool = False) -> np.ndarray:
    """Responsibilities ``(N, trees, leaves)``.

    The default normalizes over every leaf of the forest; ``per_tree``
    normalizes within each tree.  A sample whose normalizer vanishes gets
    uniform responsibilities.
    """
    lj = _log_joint(state, batch)
    n, trees, leaves = lj.shape
    axes = (2,) if per_tree else (1, 2)
    norm = logsumexp(lj, axis=axes, keepdims=True)
    bad = ~np.isfinite(norm)
    with np.errstate(invalid="ignore"):
        z = np.exp(lj - np.where(bad, 0.0, norm))
    if np.any(bad):
        fill = 1.0 / (leaves if per_tree else trees * leaves)
        z = np.where(np.broadcast_to(bad, z.shape), fill, z)
    return z


def leaf_update_iteration(state: LeafParams, batch: LeafUpdateBatch, per_tree: bool = False,
                          cov_eps: float = COV_EPS, min_mass: float = MIN_MASS) -> LeafParams:
    if batch.labels.shape[0] == 0:
        raise ValueError("leaf update needs a non-empty batch")
    z = zeta(state, batch, per_tree=per_tree)
    y = batch.labels
    k = y.shape[1]
    mass = z.sum(axis=0)
    ok = mass >= min_mass
    safe = np.where(ok, mass, 1.0)[..., None]
    means = np.einsum("ntl,nk->tlk", z, y) / safe
    diff = y[:, None, None, :] - means[None]
    scatter = np.einsum("ntl,ntlk,ntlm->tlkm", z, diff, diff) / safe[..., None]
    covs = scatter + cov_eps * np.eye(k)
    # exact symmetry so the stored covariances stay symmetric bit-for-bit
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    new_p = np.where(ok[..., None], means, state.predictions)
    new_c = np.where(ok[..., None, None], covs, state.covariances)
    return LeafParams(new_p, new_c)


def forest_nll(state: LeafParams, batch: LeafUpdateBatch, per_tree: bool = False) -> float:
    """``-sum_t log sum_j reach_j(t) N(y_t; p_j, Sigma_j)``, via log-sum-exp.

    With ``per_tree`` the inner sum runs within each tree and the per-tree
    terms are added, matching the objective of the per-tree update.
    """
    lj = _log_joint(state, batch)
    axes = (2,) if per_tree else (1, 2)
    return float(-np.sum(logsumexp(lj, axis=axes)))


def run_leaf_update(state: LeafParams, batch: LeafUpdateBatch, iters: int,
                    per_tree: bool = False, cov_eps: float = COV_EPS,
                    min_mass: float = MIN_MASS) -> Tuple[LeafParams, List[float]]:
    """Apply ``iters`` update iterations.

    Returns the final parameters and the NLL trace (``iters + 1`` values, the
    first one before any update).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    trace = [forest_nll(state, batch, per_tree)]
    for _ in range(iters):
        state = leaf_update_iteration(state, batch, per_tree, cov_eps, min_mass)
        trace.append(forest_nll(state, batch, per_tree))
    return state, trace
