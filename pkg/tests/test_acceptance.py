"""Acceptance gate. Each test prints one PASS/FAIL line and asserts it.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
when output capture is on).
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from rndf import config as C
from rndf import forest as F
from rndf import gradcheck, metrics, persist, saliency
from rndf.backbone import BackboneConfig
from rndf.cli import EXIT_OK, load_datasets, main
from rndf.data import kfold_indices, write_pnm
from rndf.leaf_update import LeafUpdateBatch, leaf_update_iteration, run_leaf_update
from rndf.model import RNDF
from rndf.tensor import relative_error, sigmoid
from rndf.trainer import evaluate

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.cfg"


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail
    return emit


def test_1_score_gradient_oracle(report):
    t = time.perf_counter()
    res = gradcheck.check_score_gradient(seed=0, instances=100)
    took = time.perf_counter() - t
    ok = res.cases >= 100 and res.max_error < 1e-6 and took < 30
    report(1, "score gradient vs finite differences", ok,
           f"{res.cases} instances, max rel err {res.max_error:.2e} (< 1e-6), {took:.1f}s (< 30s)")


def test_2_full_parameter_gradient(report):
    t = time.perf_counter()
    res = gradcheck.check_parameters(seed=0)
    took = time.perf_counter() - t
    model, _, _ = gradcheck.tiny_model(0)
    shape_ok = (model.backbone.cfg.input_dim == 16 and model.backbone.cfg.embed_dim == 8
                and model.backbone.cfg.num_blocks == 2 and model.forest_cfg.num_trees == 2
                and model.forest_cfg.depth == 3)
    ok = shape_ok and res.max_error < 1e-4 and took < 60 and res.cases == len(model.parameters())
    report(2, "end-to-end parameter gradients", ok,
           f"{res.cases} parameter tensors, max rel err {res.max_error:.2e} (< 1e-4), {took:.1f}s (< 60s)")


def test_3_routing_normalization(report):
    rng = np.random.default_rng(0)
    fcfg = F.ForestConfig(5, 6)
    bcfg = BackboneConfig(32, fcfg.num_split_outputs, embed_dim=32, num_blocks=2, hidden_dim=32, head_dim=64)
    model = RNDF.create(bcfg, fcfg, rng.uniform(0, 90, size=(100, 1)))
    # include large inputs so many routing scores saturate at the clamp
    x = rng.normal(0.0, 1.0, size=(10_000, 32)) * rng.choice([1.0, 50.0], size=(10_000, 1))
    state = model.route(x)
    sums = state.leaf_weights.sum(axis=2)
    worst = float(np.max(np.abs(sums - 1.0)))
    preds = F.forest_predict(state.leaf_weights, model.leaves)
    lo = model.leaves.predictions.min(axis=(0, 1))
    hi = model.leaves.predictions.max(axis=(0, 1))
    hull = bool(np.all(preds >= lo - 1e-9) and np.all(preds <= hi + 1e-9))
    ok = worst <= 1e-9 and hull
    report(3, "routing normalization", ok,
           f"10000 inputs, max |sum-1| {worst:.1e} (<= 1e-9), predictions inside leaf hull: {hull}")


def random_em_instance(rng):
    trees, depth, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 2, 3]))
    n = int(rng.integers(20, 80))
    cfg = F.ForestConfig(trees, depth, k)
    reach = F.leaf_weights(rng.uniform(0.05, 0.95, size=(n, trees, cfg.num_splits)))
    y = rng.normal(0.0, 5.0, size=(n, k))
    a = rng.normal(size=(trees, cfg.num_leaves, k, k))
    state = F.LeafParams(rng.normal(0.0, 5.0, size=(trees, cfg.num_leaves, k)),
                         a @ np.swapaxes(a, -1, -2) + np.eye(k))
    return state, LeafUpdateBatch(y, reach)


def test_4_leaf_update_guarantee(report):
    rng = np.random.default_rng(0)
    worst_rise = -np.inf
    for _ in range(50):
        state, batch = random_em_instance(rng)
        _, trace = run_leaf_update(state, batch, 20)
        worst_rise = max(worst_rise, max(b - a for a, b in zip(trace, trace[1:])))
    # single leaf: one update recovers the batch mean and (biased) covariance
    y = rng.normal(size=(40, 3)) @ rng.normal(size=(3, 3)) + 7.0
    one = F.LeafParams(np.zeros((1, 1, 3)), np.eye(3)[None, None].copy())
    new = leaf_update_iteration(one, LeafUpdateBatch(y, np.ones((40, 1, 1))), cov_eps=1e-14)
    mean = y.mean(axis=0)
    cov = (y - mean).T @ (y - mean) / len(y)
    err_m = float(np.max(np.abs(new.predictions[0, 0] - mean)))
    err_c = float(np.max(np.abs(new.covariances[0, 0] - cov)))
    ok = worst_rise <= 1e-8 and err_m <= 1e-10 and err_c <= 1e-10
    report(4, "leaf update never increases the NLL", ok,
           f"50 instances x 20 iterations, largest step change {worst_rise:.1e} (<= 1e-8); "
           f"single leaf mean err {err_m:.1e}, cov err {err_c:.1e} (<= 1e-10)")


def knn_predict(xtr, ytr, xq, k):
    # brute force squared distances; ties broken by index through a stable sort
    d = (xq ** 2).sum(1)[:, None] - 2 * xq @ xtr.T + (xtr ** 2).sum(1)[None]
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return ytr[idx].mean(axis=1)


def knn_baseline(train, test, ks=(1, 3, 5, 10, 20, 40)):
    """k picked by 5-fold cross-validation on the training split only."""
    x, y = train.x, train.y[:, 0]
    cv = {}
    for k in ks:
        errs = [metrics.mae(knn_predict(x[tr], y[tr], x[va], k), y[va]) for tr, va in kfold_indices(len(y), 5, 0)]
        cv[k] = float(np.mean(errs))
    best = min(cv, key=cv.get)
    return best, metrics.mae(knn_predict(x, y, test.x, best), test.y[:, 0])


def test_5_reference_training(report, tmp_path, capsys):
    cfg = C.load(str(REFERENCE))
    assert (cfg.forest.num_trees, cfg.forest.depth, cfg.train.epochs) == (5, 6, 30)
    assert (cfg.data.n_train, cfg.data.n_test, cfg.data.input_dim, cfg.data.noise_std, cfg.data.seed) == \
        (4000, 1000, 32, 2.0, 0)
    t = time.perf_counter()
    code = main(["train", "--config", str(REFERENCE), "--out", str(tmp_path / "ref")])
    took = time.perf_counter() - t
    capsys.readouterr()
    assert code == EXIT_OK
    train, _, test = load_datasets(cfg)
    model = persist.load(str(tmp_path / "ref" / "final.ckpt"))
    mae, cs = evaluate(model, test)
    k, base = knn_baseline(train, test)
    ok = mae <= 2.5 and mae <= 1.2 * base and took < 600
    report(5, "reference training run", ok,
           f"test MAE {mae:.3f} (<= 2.5), CS@5 {cs:.3f}, k-NN (k={k}) MAE {base:.3f} "
           f"(bound {1.2 * base:.3f}), {took:.0f}s (< 600s)")


def depth6_image_model(seed=0):
    fcfg = F.ForestConfig(2, 6)
    bcfg = BackboneConfig(3 * 4 * 4, fcfg.num_split_outputs, embed_dim=8, num_blocks=2, hidden_dim=8,
                          head_dim=16, pool=2, image_shape=(3, 8, 8), seed=seed)
    return RNDF.create(bcfg, fcfg, np.array([[10.0], [60.0]]), seed=seed,
                       preprocess={"kind": "image", "resize_to": 8, "crop_to": 8, "flip_prob": 0.5,
                                   "channel_mean": None, "channel_std": None, "train_mode": False})


def test_6_dsm_correctness(report, tmp_path, capsys):
    model = depth6_image_model(1)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(3, 8, 8))
    res = saliency.trace_dsm_sequence(model, x, ground_truth=33.0)
    ns = model.forest_cfg.num_splits
    h, worst = 1e-5, 0.0
    for node in res.nodes:
        col = res.tree * ns + node

        def s(v):
            return sigmoid(model.logits(v[None]), clamp=False).data[0, col]

        v = rng.normal(size=x.shape)
        fd = (s(x + h * v) - s(x - h * v)) / (2 * h)
        worst = max(worst, relative_error(np.sum(saliency.dsm_raw(model, x, node, res.tree) * v), fd))
    path_err = abs(float(np.prod(res.branch_probs)) - res.path_weight)

    ckpt = tmp_path / "d6.ckpt"
    persist.save(model, str(ckpt))
    img = tmp_path / "in.ppm"
    write_pnm(str(img), rng.integers(0, 256, size=(3, 8, 8)))
    out = tmp_path / "maps"
    code = main(["visualize", str(ckpt), str(img), "--label", "33", "--out", str(out)])
    capsys.readouterr()
    pgms = [p for p in os.listdir(out) if p.endswith(".pgm")] if code == EXIT_OK else []
    side = json.loads((out / "trace.json").read_text()) if code == EXIT_OK else {}
    side_err = abs(float(np.prod(side.get("branch_probs", [0.0]))) - side.get("path_weight", 1.0))
    ok = worst < 1e-4 and path_err <= 1e-9 and len(pgms) == 6 and side_err <= 1e-9
    report(6, "decision saliency maps", ok,
           f"{len(res.nodes)} path nodes, max directional rel err {worst:.1e} (< 1e-4); "
           f"path weight err {path_err:.1e} (<= 1e-9); visualize wrote {len(pgms)} maps for depth 6")


SMALL = """\
data.source = synthetic
data.n_train = 300
data.n_test = 100
data.input_dim = 8
forest.num_trees = 3
forest.depth = 4
backbone.embed_dim = 16
backbone.num_blocks = 2
backbone.hidden_dim = 16
backbone.head_dim = 32
train.batch_size = 25
train.leaf_update_period = 6
train.leaf_batch = 100
train.leaf_iters = 5
train.lr = 0.03
train.epochs = 3
train.seed = 4
"""


def test_7_determinism_and_persistence(report, tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL, encoding="utf-8")
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / run)]) == EXIT_OK
    capsys.readouterr()
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    same_csv = csv_a == (tmp_path / "b" / "metrics.csv").read_bytes()
    model = persist.load(str(tmp_path / "a" / "final.ckpt"))
    persist.save(model, str(tmp_path / "copy.ckpt"))
    again = persist.load(str(tmp_path / "copy.ckpt"))
    probe = np.random.default_rng(9).uniform(size=(200, 8))
    same_pred = model.predict(probe).tobytes() == again.predict(probe).tobytes()
    same_file = (tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "a" / "final.ckpt").read_bytes()
    ok = same_csv and same_pred and same_file
    report(7, "determinism and checkpoint round trip", ok,
           f"metrics CSV identical: {same_csv} ({len(csv_a)} bytes); round-trip predictions identical: "
           f"{same_pred}; re-saved file identical: {same_file}")


def test_8_metrics(report):
    m = metrics.mae([1.0, 2.0, 3.0], [2.0, 2.0, 5.0])
    # absolute errors of a typical age-estimation run; hand count of |e| <= 5
    errors = np.array([0.0, 1.5, 4.9, 5.0, 5.1, 7.0, 2.0, 12.0, 3.0, 5.0])
    hand = 7 / 10
    cs = metrics.cumulative_score(errors, 5.0)
    cs_signed = metrics.cumulative_score(-errors, 5.0)
    ok = m == 1.0 and cs == hand and cs_signed == hand
    report(8, "MAE and cumulative score", ok, f"MAE {m} (= 1.0); CS@5 {cs} (hand count {hand})")
