"""Finite-difference self-checks for the tensor engine and the forest."""
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import forest as F
from . import tensor as T
from .backbone import BackboneConfig
from .model import RNDF


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.max_error:.3e} tol={self.tolerance:.0e} cases={self.cases}"


def _away_from_zero(rng, shape, lo=-2.0, hi=2.0, gap=1e-2):
    x = rng.uniform(lo, hi, size=shape)
    return np.where(np.abs(x) < gap, gap * np.sign(x + (x == 0)), x)


def check_ops(seed: int = 0, trials: int = 5, h: float = 1e-5, tol: float = 1e-5,
              corrupt: bool = False) -> CheckResult:
    """Every differentiable engine op against central differences."""
    rng = np.random.default_rng(seed)
    worst, cases = 0.0, 0

    for _ in range(trials):
        m, k, n = rng.integers(1, 5, size=3)
        a_shape, b_shape = (int(m), int(k)), (int(k), int(n))
        probes: List[tuple] = [
            ("matmul", lambda a, b: T.matmul(a, b), [a_shape, b_shape]),
            ("add", T.add, [a_shape, a_shape]),
            ("add_bias", T.add, [a_shape, (a_shape[1],)]),
            ("sub", T.sub, [a_shape, a_shape]),
            ("mul", T.mul, [a_shape, a_shape]),
            ("scale", lambda a: T.scale(a, 1.7), [a_shape]),
            ("relu", T.relu, [a_shape]),
            ("sigmoid", lambda a: T.sigmoid(a, clamp=False), [a_shape]),
            ("sum_axis", lambda a: T.reduce_sum(a, axis=1), [a_shape]),
            ("mean_axis", lambda a: T.reduce_mean(a, axis=0), [a_shape]),
            ("reshape", lambda a: T.reshape(a, (-1,)), [a_shape]),
            ("transpose", T.transpose, [a_shape]),
        ]
        for name, fn, shapes in probes:
            inputs = [_away_from_zero(rng, s) for s in shapes]
            weights = rng.normal(size=fn(*[T.Tensor(x) for x in inputs]).shape)
            for pos in range(len(inputs)):
                def f(x, pos=pos):
                    args = [T.Tensor(v) for v in inputs]
                    args[pos] = x if isinstance(x, T.Tensor) else T.Tensor(x)
                    return (fn(*args) * T.Tensor(weights)).sum()

                tensors = [T.Tensor(v, requires_grad=True) for v in inputs]
                out = (fn(*tensors) * T.Tensor(weights)).sum()
                T.backward(out)
                analytic = tensors[pos].grad
                if corrupt:
                    analytic = analytic * (1.0 + 1e-3)
                numeric = T.finite_diff_gradient(lambda x: f(x), inputs[pos].copy(), h)
                worst = max(worst, T.relative_error(analytic, numeric))
                cases += 1
    return CheckResult("tensor ops", worst, tol, cases)


def random_forest_instance(rng, trees=None, depth=None, k=None, batch=None):
    trees = int(rng.integers(1, 4)) if trees is None else trees
    depth = int(rng.integers(2, 5)) if depth is None else depth
    k = int(rng.choice([1, 3])) if k is None else k
    batch = int(rng.integers(1, 9)) if batch is None else batch
    cfg = F.ForestConfig(trees, depth, k)
    scores = rng.uniform(0.05, 0.95, size=(batch, trees, cfg.num_splits))
    leaves = F.LeafParams(rng.normal(0.0, 3.0, size=(trees, cfg.num_leaves, k)),
                          np.broadcast_to(np.eye(k), (trees, cfg.num_leaves, k, k)).copy())
    y = rng.normal(0.0, 3.0, size=(batch, k))
    return cfg, scores, leaves, y


def composite_loss(scores, leaves, y) -> float:
    return F.squared_loss(F.forest_predict(F.leaf_weights(scores), leaves), y)


def check_score_gradient(seed: int = 0, instances: int = 100, h: float = 1e-3, tol: float = 1e-6,
                         corrupt: bool = False) -> CheckResult:
    """Analytic score gradient against central differences of the composite loss.

    The loss is quadratic in any single score, so central differences carry no
    truncation error and a coarse step keeps rounding error small.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        cfg, s, leaves, y = random_forest_instance(rng)
        w = F.leaf_weights(s)
        P = F.forest_predict(w, leaves)
        analytic = F.grad_scores(P, y, w, leaves, s)
        if corrupt:
            analytic = analytic * (1.0 + 1e-3)
        numeric = T.finite_diff_gradient(lambda v: composite_loss(v, leaves, y), s, h)
        worst = max(worst, T.relative_error(analytic, numeric))
    return CheckResult("forest score gradient", worst, tol, instances)


def tiny_model(seed: int = 0, input_dim: int = 16, embed_dim: int = 8, num_blocks: int = 2,
               trees: int = 2, depth: int = 3, k: int = 1, batch: int = 6):
    rng = np.random.default_rng(seed)
    fcfg = F.ForestConfig(trees, depth, k)
    bcfg = BackboneConfig(input_dim, fcfg.num_split_outputs, embed_dim=embed_dim, num_blocks=num_blocks,
                          hidden_dim=embed_dim, head_dim=embed_dim, seed=seed)
    x = rng.uniform(-1.0, 1.0, size=(batch, input_dim))
    y = rng.normal(0.0, 2.0, size=(batch, k))
    model = RNDF.create(bcfg, fcfg, y, seed=seed)
    # small random biases so no parameter group is trivially zero
    for name, p in model.parameters().items():
        if name.endswith(".bias"):
            p.data[...] = rng.normal(0.0, 0.1, size=p.shape)
    return model, x, y


def check_parameters(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, corrupt: bool = False,
                     model_factory: Optional[Callable] = None) -> CheckResult:
    """End-to-end backbone gradients (score-gradient injection) against finite differences."""
    model, x, y = (model_factory or tiny_model)(seed)
    _, _, grads = model.loss_and_grad(x, y, reduction="sum")
    worst, cases = 0.0, 0
    for name, p in model.parameters().items():
        def f(arr, p=p):
            saved = p.data.copy()
            p.data[...] = arr
            try:
                return F.squared_loss(model.predict(x), y)
            finally:
                p.data[...] = saved

        numeric = T.finite_diff_gradient(f, p.data.copy(), h)
        analytic = grads[name] * (1.0 + 1e-3) if corrupt else grads[name]
        worst = max(worst, T.relative_error(analytic, numeric))
        cases += 1
    return CheckResult("backbone parameters", worst, tol, cases)


def check_tape_agreement(seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """Score-gradient injection and full-tape differentiation give the same gradients."""
    model, x, y = tiny_model(seed)
    _, _, injected = model.loss_and_grad(x, y, reduction="sum")
    injected = {k: v.copy() for k, v in injected.items()}
    T.backward(model.loss_tensor(x, y, reduction="sum"))
    worst = max(T.relative_error(injected[n], p.grad, floor=1e-12)
                for n, p in model.parameters().items())
    return CheckResult("injection vs tape", worst, tol, len(injected))


def run_all(seed: int = 0, corrupt: bool = False) -> List[CheckResult]:
    return [
        check_ops(seed, corrupt=corrupt),
        check_score_gradient(seed, corrupt=corrupt),
        check_parameters(seed, corrupt=corrupt),
        check_tape_agreement(seed),
    ]
