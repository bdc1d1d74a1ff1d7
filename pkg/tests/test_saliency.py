import json

import numpy as np
import pytest

from rndf import forest as F
from rndf import saliency
from rndf.backbone import BackboneConfig
from rndf.data import read_pnm
from rndf.gradcheck import tiny_model
from rndf.model import RNDF
from rndf.tensor import SIGMOID_EPS, Tensor, backward, relative_error, sigmoid


def image_model(seed=0, depth=3, trees=2):
    fcfg = F.ForestConfig(trees, depth)
    bcfg = BackboneConfig(3 * 2 * 2, fcfg.num_split_outputs, embed_dim=6, num_blocks=1, hidden_dim=6,
                          head_dim=8, pool=2, image_shape=(3, 4, 4), seed=seed)
    return RNDF.create(bcfg, fcfg, np.array([[0.0], [10.0]]), seed=seed)


def score(model, x, tree, node):
    s = sigmoid(model.logits(x[None]), clamp=False).data
    return s[0, tree * model.forest_cfg.num_splits + node]


def test_zero_head_gives_zero_maps():
    model, x, _ = tiny_model(0)
    model.parameters()["head2.weight"].data[...] = 0.0
    model.parameters()["head2.bias"].data[...] = 0.0
    np.testing.assert_array_equal(saliency.dsm(model, x[0], node=2, tree=1), 0.0)


def test_directional_finite_difference():
    model = image_model(1)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(3, 4, 4))
    h = 1e-5
    for tree in range(2):
        for node in range(model.forest_cfg.num_splits):
            raw = saliency.dsm_raw(model, x, node, tree)
            assert raw.shape == x.shape
            v = rng.normal(size=x.shape)
            fd = (score(model, x + h * v, tree, node) - score(model, x - h * v, tree, node)) / (2 * h)
            assert relative_error(np.sum(raw * v), fd) < 1e-4


def test_linear_model_map_is_weight_row():
    d = 5
    fcfg = F.ForestConfig(1, 1)
    bcfg = BackboneConfig(d, 1, embed_dim=d, num_blocks=0, hidden_dim=d, head_dim=d, seed=0)
    model = RNDF.create(bcfg, fcfg, np.array([[0.0], [1.0]]))
    p = model.parameters()
    p["embed.weight"].data[...] = np.eye(d)
    p["head1.weight"].data[...] = np.eye(d)
    w = np.array([0.3, -0.2, 0.5, 0.1, -0.4])
    p["head2.weight"].data[...] = w[:, None]
    x = np.array([0.2, 0.4, 0.6, 0.8, 1.0])
    z = w @ x
    s = 1.0 / (1.0 + np.exp(-z))
    np.testing.assert_allclose(saliency.dsm(model, x, 0), s * (1 - s) * w, rtol=1e-12)


def test_multichannel_reduction_is_max_abs():
    model = image_model(3)
    x = np.random.default_rng(4).uniform(size=(3, 4, 4))
    raw = saliency.dsm_raw(model, x, 0)
    np.testing.assert_array_equal(saliency.dsm(model, x, 0), np.abs(raw).max(axis=0))


def test_invalid_node():
    model, x, _ = tiny_model(0)
    with pytest.raises(ValueError):
        saliency.dsm(model, x[0], node=7)
    with pytest.raises(ValueError):
        saliency.dsm(model, x[0], node=0, tree=2)


def test_gradient_linearity():
    model, x, _ = tiny_model(1)
    xt = Tensor(x[:1], requires_grad=True)
    s = sigmoid(model.logits(xt))
    onehot = np.zeros(s.shape)
    onehot[0, 3] = 1.0
    backward((s * Tensor(onehot)).sum())
    g1 = xt.grad.copy()
    backward((s * Tensor(2.5 * onehot)).sum())
    np.testing.assert_allclose(xt.grad, 2.5 * g1, rtol=1e-14)


def test_trace_structure_and_path_weight():
    model = image_model(5, depth=4)
    x = np.random.default_rng(6).uniform(size=(3, 4, 4))
    res = saliency.trace_dsm_sequence(model, x, ground_truth=7.0)
    assert len(res.maps) == 4 and res.nodes[0] == 0
    for parent, child, left in zip(res.nodes, res.nodes[1:], res.goes_left):
        assert child == 2 * parent + (1 if left else 2)
    assert all(m.shape == (4, 4) for m in res.maps)
    assert all(r.shape == (3, 4, 4) for r in res.raw_gradients)
    assert all(0.0 < s < 1.0 for s in res.scores)
    assert abs(np.prod(res.branch_probs) - res.path_weight) <= 1e-9
    w = model.route(x[None]).leaf_weights[0]
    assert res.path_weight == w.max()
    assert res.ground_truth == [7.0]


def test_trace_depth1_and_deterministic_routing():
    fcfg = F.ForestConfig(1, 1)
    bcfg = BackboneConfig(3, 1, embed_dim=2, num_blocks=0, hidden_dim=2, head_dim=2)
    model = RNDF.create(bcfg, fcfg, np.array([[0.0], [1.0]]))
    res = saliency.trace_dsm_sequence(model, np.ones(3))
    assert len(res.maps) == 1 and res.nodes == [0]

    model, x, _ = tiny_model(2)
    logits = np.full((1, 14), 0.0)
    # tree 1: right at the root, then left twice: leaf 4
    logits[0, 7:] = [-40, 40, 40, 40, 40, 40, 40]
    model.parameters()["head2.weight"].data[...] = 0.0
    model.parameters()["head2.bias"].data[...] = logits[0]
    res = saliency.trace_dsm_sequence(model, x[0])
    assert (res.tree, res.leaf, res.nodes) == (1, 4, [0, 2, 5])
    assert res.scores[0] == SIGMOID_EPS


def test_normalize_and_filenames():
    np.testing.assert_array_equal(saliency.normalize_map(np.full((2, 2), 3.0)), 0.0)
    from rndf.data import quantize
    q = quantize(saliency.normalize_map(np.array([[0.0, 1.0], [2.0, 3.0]])))
    np.testing.assert_array_equal(q, [[0, 85], [170, 255]])
    assert saliency.map_filename(5, 0.25) == "node5_s0.2500.pgm"


def test_export_maps(tmp_path):
    model = image_model(7, depth=3)
    x = np.random.default_rng(8).uniform(size=(3, 4, 4))
    res = saliency.trace_dsm_sequence(model, x, ground_truth=4.0)
    out = tmp_path / "new" / "dir"
    paths = saliency.export_maps(res, str(out))
    assert len(paths) == 3
    from rndf.data import quantize
    for p, m in zip(paths, res.maps):
        raster, maxval = read_pnm(p)
        assert maxval == 255 and raster.shape == (1, 4, 4)
        np.testing.assert_array_equal(raster[0], quantize(saliency.normalize_map(m)))
    side = json.loads((out / "trace.json").read_text())
    for key in ("tree", "leaf", "path_weight", "nodes", "probs", "prediction", "ground_truth"):
        assert key in side
    assert side["nodes"] == res.nodes
    assert side["probs"] == res.scores
    assert abs(np.prod(side["branch_probs"]) - side["path_weight"]) <= 1e-9
    assert side["files"] == [saliency.map_filename(n, s) for n, s in zip(res.nodes, res.scores)]


def test_vector_maps_export_as_single_row(tmp_path):
    model, x, _ = tiny_model(4)
    res = saliency.trace_dsm_sequence(model, x[0])
    paths = saliency.export_maps(res, str(tmp_path))
    raster, _ = read_pnm(paths[0])
    assert raster.shape == (1, 1, 16)
