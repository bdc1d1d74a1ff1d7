import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rndf import forest as F
from rndf.leaf_update import (COV_EPS, LeafUpdateBatch, forest_nll, gaussian_density,
                              leaf_update_iteration, log_gaussian_density, run_leaf_update, zeta)


def scalar_leaves(means, variances):
    means = np.asarray(means, dtype=np.float64)
    return F.LeafParams(means[..., None], np.asarray(variances, dtype=np.float64)[..., None, None]
                        * np.ones(means.shape + (1, 1)))


def random_instance(rng, n=40, trees=2, depth=2, k=1):
    cfg = F.ForestConfig(trees, depth, k)
    s = rng.uniform(0.05, 0.95, size=(n, trees, cfg.num_splits))
    reach = F.leaf_weights(s)
    y = rng.normal(0.0, 3.0, size=(n, k))
    preds = rng.normal(0.0, 3.0, size=(trees, cfg.num_leaves, k))
    a = rng.normal(size=(trees, cfg.num_leaves, k, k))
    covs = a @ np.swapaxes(a, -1, -2) + 0.5 * np.eye(k)
    return F.LeafParams(preds, covs), LeafUpdateBatch(y, reach)


def test_density_values():
    assert gaussian_density([0.0], [0.0], [[1.0]]) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-6)
    assert gaussian_density([1.0, 2.0], [1.0, 2.0], np.eye(2)) == pytest.approx(0.159155, abs=1e-6)


def test_density_integrates_to_one():
    grid = np.linspace(-40.0, 40.0, 200001)
    dens = np.exp(log_gaussian_density(grid[:, None], np.array([[1.5]]), np.array([[[4.0]]])))[:, 0]
    assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-6


def test_density_matches_closed_form_multivariate():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    cov = a @ a.T + np.eye(3)
    mu, y = rng.normal(size=3), rng.normal(size=3)
    d = y - mu
    ref = math.exp(-0.5 * d @ np.linalg.solve(cov, d)) / math.sqrt((2 * math.pi) ** 3 * np.linalg.det(cov))
    assert gaussian_density(y, mu, cov) == pytest.approx(ref, rel=1e-12)


def test_zeta_examples():
    leaves = scalar_leaves([[0.0, 0.0]], [[1.0, 1.0]])
    z = zeta(leaves, LeafUpdateBatch([[0.3]], [[[0.5, 0.5]]]))
    np.testing.assert_allclose(z, 0.5, rtol=1e-15)
    leaves = scalar_leaves([[0.0, 5.0, 1.0, 2.0]], [[1.0] * 4])
    z = zeta(leaves, LeafUpdateBatch([[0.3]], [[[0.0, 1.0, 0.0, 0.0]]]))
    np.testing.assert_array_equal(z[0, 0], [0.0, 1.0, 0.0, 0.0])


def test_zeta_degenerate_sample_is_uniform():
    leaves = scalar_leaves([[0.0, 1.0]], [[1.0, 1.0]])
    z = zeta(leaves, LeafUpdateBatch([[0.0]], [[[0.0, 0.0]]]))
    np.testing.assert_array_equal(z, 0.5)


def test_zeta_far_labels_do_not_underflow():
    leaves = scalar_leaves([[0.0, 1.0]], [[1e-4, 1e-4]])
    z = zeta(leaves, LeafUpdateBatch([[500.0]], [[[0.5, 0.5]]]))
    assert np.all(np.isfinite(z))
    assert z[0, 0, 1] == pytest.approx(1.0)


@pytest.mark.parametrize("per_tree", [False, True])
def test_zeta_normalization(per_tree):
    state, batch = random_instance(np.random.default_rng(1), trees=3, depth=3, k=2)
    z = zeta(state, batch, per_tree=per_tree)
    sums = z.sum(axis=2) if per_tree else z.sum(axis=(1, 2))
    np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-9)


def test_single_leaf_is_gaussian_mle():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(30, 2)) @ np.array([[2.0, 0.3], [0.0, 1.0]]) + 5.0
    state = F.LeafParams(np.zeros((1, 1, 2)), np.eye(2)[None, None].copy())
    batch = LeafUpdateBatch(y, np.ones((30, 1, 1)))
    new = leaf_update_iteration(state, batch)
    mean = y.mean(axis=0)
    cov = (y - mean).T @ (y - mean) / 30
    np.testing.assert_allclose(new.predictions[0, 0], mean, rtol=0, atol=1e-10)
    np.testing.assert_allclose(new.covariances[0, 0], cov + COV_EPS * np.eye(2), rtol=0, atol=1e-10)
    # already at the fixed point: a further iteration barely moves anything
    again = leaf_update_iteration(new, batch)
    assert np.max(np.abs(again.predictions - new.predictions)) < 1e-10
    assert np.max(np.abs(again.covariances - new.covariances)) < 1e-10


def test_constant_labels():
    state, batch = random_instance(np.random.default_rng(3))
    batch = LeafUpdateBatch(np.full_like(batch.labels, 4.25), batch.leaf_reach)
    new = leaf_update_iteration(state, batch)
    np.testing.assert_allclose(new.predictions, 4.25, rtol=1e-14)
    assert new.min_eigenvalue() >= COV_EPS * (1 - 1e-9)


def test_starved_leaf_keeps_parameters():
    leaves = scalar_leaves([[1.0, 7.0]], [[2.0, 3.0]])
    batch = LeafUpdateBatch([[0.0], [2.0]], [[[1.0, 0.0]], [[1.0, 0.0]]])
    new = leaf_update_iteration(leaves, batch)
    assert new.predictions[0, 1, 0] == 7.0
    assert new.covariances[0, 1, 0, 0] == 3.0
    assert new.predictions[0, 0, 0] == 1.0


def scalar_em_oracle(y, reach, means, variances, iters):
    """Plain-loop EM for a scalar mixture with per-sample mixing weights."""
    means, variances = list(means), list(variances)
    J = len(means)
    for _ in range(iters):
        resp = []
        for t in range(len(y)):
            joint = [reach[t][j] * math.exp(-0.5 * (y[t] - means[j]) ** 2 / variances[j])
                     / math.sqrt(2 * math.pi * variances[j]) for j in range(J)]
            tot = sum(joint)
            resp.append([v / tot for v in joint])
        new_m, new_v = [], []
        for j in range(J):
            mass = sum(r[j] for r in resp)
            m = sum(r[j] * yt for r, yt in zip(resp, y)) / mass
            v = sum(r[j] * (yt - m) ** 2 for r, yt in zip(resp, y)) / mass + COV_EPS
            new_m.append(m)
            new_v.append(v)
        means, variances = new_m, new_v
    return means, variances


def test_two_leaf_bimodal_matches_scalar_em():
    rng = np.random.default_rng(4)
    y = np.concatenate([rng.normal(10.0, 1.0, 40), rng.normal(50.0, 2.0, 40)])
    # sharp but imperfect routing: 90% of the reach goes to the matching leaf
    reach = np.where(np.arange(80)[:, None] < 40, [0.9, 0.1], [0.1, 0.9])
    leaves = scalar_leaves([[20.0, 40.0]], [[100.0, 100.0]])
    batch = LeafUpdateBatch(y[:, None], reach[:, None, :])
    new, trace = run_leaf_update(leaves, batch, 20)
    m_ref, v_ref = scalar_em_oracle(list(y), reach.tolist(), [20.0, 40.0], [100.0, 100.0], 20)
    np.testing.assert_allclose(new.predictions[0, :, 0], m_ref, rtol=1e-10)
    np.testing.assert_allclose(new.covariances[0, :, 0, 0], v_ref, rtol=1e-9)
    assert new.predictions[0, 0, 0] == pytest.approx(y[:40].mean(), abs=1e-6)
    assert new.predictions[0, 1, 0] == pytest.approx(y[40:].mean(), abs=1e-6)


def test_run_leaf_update_single_iteration_equals_step():
    state, batch = random_instance(np.random.default_rng(5))
    a, trace = run_leaf_update(state, batch, 1)
    b = leaf_update_iteration(state, batch)
    assert a.predictions.tobytes() == b.predictions.tobytes()
    assert len(trace) == 2
    with pytest.raises(ValueError):
        run_leaf_update(state, batch, 0)


def test_nll_examples():
    one = scalar_leaves([[0.0]], [[1.0]])
    assert forest_nll(one, LeafUpdateBatch([[0.0]], [[[1.0]]])) == pytest.approx(0.918939, abs=1e-6)
    two = scalar_leaves([[0.0, 0.0]], [[1.0, 1.0]])
    nll2 = forest_nll(two, LeafUpdateBatch([[0.7]], [[[0.5, 0.5]]]))
    assert nll2 == pytest.approx(forest_nll(one, LeafUpdateBatch([[0.7]], [[[1.0]]])), rel=1e-14)


def test_nll_matches_naive():
    state, batch = random_instance(np.random.default_rng(6), n=15, trees=2, depth=2, k=2)
    naive = 0.0
    for t in range(15):
        tot = 0.0
        for tr in range(2):
            for j in range(4):
                tot += batch.leaf_reach[t, tr, j] * gaussian_density(
                    batch.labels[t], state.predictions[tr, j], state.covariances[tr, j])
        naive -= math.log(tot)
    assert forest_nll(state, batch) == pytest.approx(naive, rel=1e-9)


def test_batch_validation():
    with pytest.raises(ValueError):
        LeafUpdateBatch(np.zeros((3, 1)), np.ones((2, 1, 2)))
    with pytest.raises(ValueError):
        LeafUpdateBatch(np.zeros((1, 1)), -np.ones((1, 1, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2]),
       st.booleans())
def test_nll_monotone_spd_and_hull(seed, trees, depth, k, per_tree):
    state, batch = random_instance(np.random.default_rng(seed), n=30, trees=trees, depth=depth, k=k)
    new, trace = run_leaf_update(state, batch, 10, per_tree=per_tree)
    assert all(b <= a + 1e-8 for a, b in zip(trace, trace[1:]))
    assert new.min_eigenvalue() >= COV_EPS * (1 - 1e-9)
    lo, hi = batch.labels.min(0), batch.labels.max(0)
    assert np.all(new.predictions >= lo - 1e-9) and np.all(new.predictions <= hi + 1e-9)
