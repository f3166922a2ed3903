import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecla import gmm as G
from ecla.errors import ValidationError
from ecla.gmm import UNLABELED, VAR_FLOOR, GmmModel


def two_class_data(rng, n=100, noise=1e-3):
    z = np.concatenate([rng.standard_normal((n, 2)) * noise, 10 + rng.standard_normal((n, 2)) * noise])
    return z, np.repeat([0, 1], n)


def planted(f=8, k=3, seed=0, spread=6.0):
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((k, f)) * spread
    variances = rng.uniform(0.5, 1.5, (k, f))
    weights = np.array([0.2, 0.3, 0.5])[:k] if k == 3 else np.full(k, 1.0 / k)
    return GmmModel(weights, means, variances, np.arange(k))


def assert_invariants(model, k, labels):
    assert model.num_components == k
    assert abs(model.weights.sum() - 1.0) < 1e-9
    assert np.all(model.variances >= VAR_FLOOR)
    np.testing.assert_array_equal(model.labels, labels)


def test_fit_labeled_two_clusters(rng):
    z, y = two_class_data(rng)
    model = G.fit_labeled(z, y)
    np.testing.assert_allclose(model.means, [[0, 0], [10, 10]], atol=0.1)
    np.testing.assert_allclose(model.means[1], z[y == 1].mean(axis=0), rtol=1e-12)


def test_fit_labeled_identical_points_clamp_to_floor():
    model = G.fit_labeled(np.tile([1.5, -2.0], (5, 1)), np.zeros(5, int))
    np.testing.assert_array_equal(model.means[0], [1.5, -2.0])
    np.testing.assert_array_equal(model.variances[0], [VAR_FLOOR, VAR_FLOOR])


def test_fit_labeled_weights_follow_frequency(rng):
    model = G.fit_labeled(rng.standard_normal((100, 3)), np.repeat([0, 1], [30, 70]))
    np.testing.assert_allclose(model.weights, [0.3, 0.7])


def test_fit_labeled_rejects_singleton_class(rng):
    with pytest.raises(ValidationError, match=r"\[2\]"):
        G.fit_labeled(rng.standard_normal((5, 2)), [0, 0, 1, 1, 2])


def test_log_likelihood_standard_normal_at_origin():
    model = GmmModel(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)), np.array([0]))
    assert G.log_likelihood(model, [[0.0]]) == pytest.approx(-0.9189385332, abs=1e-9)


def test_log_likelihood_far_point_is_finite():
    model = planted()
    value = G.log_likelihood(model, np.full((1, 8), 1e4))
    assert np.isfinite(value) and value < -1e5


def test_log_likelihood_matches_naive_density(rng):
    model = planted(f=3)
    z = rng.standard_normal((5, 3)) * 3
    dens = np.zeros(5)
    for w, mu, var in zip(model.weights, model.means, model.variances):
        norm = np.prod(1.0 / np.sqrt(2 * np.pi * var))
        dens += w * norm * np.exp(-0.5 * np.sum((z - mu) ** 2 / var, axis=1))
    assert G.log_likelihood(model, z) == pytest.approx(np.mean(np.log(dens)), rel=1e-10)


def test_em_zero_iterations_is_identity(rng):
    model = planted()
    out = G.em_refine(model, rng.standard_normal((20, 8)), 0)
    for attr in ("weights", "means", "variances"):
        np.testing.assert_array_equal(getattr(out, attr), getattr(model, attr))


def test_em_log_likelihood_monotone():
    rng = np.random.default_rng(5)
    truth = planted(spread=1.5)
    z, _ = G.sample(truth, 2000, rng)
    # deliberately bad start so EM has work to do
    start = GmmModel(np.full(3, 1 / 3), rng.standard_normal((3, 8)), np.full((3, 8), 4.0), np.arange(3))
    model, history = G.em_refine(start, z, 20, return_history=True)
    assert len(history) == 21
    assert all(b >= a - 1e-9 for a, b in zip(history, history[1:]))
    assert_invariants(model, 3, [0, 1, 2])


def test_em_stationary_on_own_samples():
    truth = planted()
    z, _ = G.sample(truth, 20_000, np.random.default_rng(1))
    model = G.em_refine(truth, z, 10)
    assert np.max(np.abs(model.means - truth.means)) < 0.05
    assert np.max(np.abs(model.variances - truth.variances)) < 0.05
    assert np.max(np.abs(model.weights - truth.weights)) < 0.05


def test_em_empty_component_is_kept_and_warned(rng):
    model = GmmModel(np.array([0.5, 0.5]), np.array([[0.0], [1e6]]), np.ones((2, 1)), np.array([0, 1]))
    with pytest.warns(RuntimeWarning, match="no responsibility"):
        out = G.em_refine(model, rng.standard_normal((50, 1)), 1)
    assert out.means[1, 0] == 1e6
    assert_invariants(out, 2, [0, 1])


def test_planted_mixture_recovery():
    truth = planted(f=8, k=3, seed=2)
    z, y = G.sample(truth, 5000, np.random.default_rng(3))
    model = G.fit_labeled(z, y)
    gap = min(np.linalg.norm(truth.means[i] - truth.means[j]) for i in range(3) for j in range(i))
    assert np.max(np.linalg.norm(model.means - truth.means, axis=1)) < 0.05 * gap
    assert np.max(np.abs(model.weights - truth.weights)) < 0.02


def test_fit_of_large_sample_recovers_parameters():
    truth = planted(f=4)
    z, y = G.sample(truth, 50_000, np.random.default_rng(4))
    model = G.fit_labeled(z, y)
    # "component scale" read as the magnitude of the component means
    assert np.max(np.abs(model.means - truth.means)) < 0.02 * np.abs(truth.means).max()
    assert np.max(np.abs(model.weights - truth.weights)) < 0.02


def test_update_replay_only_equals_fit_labeled(rng):
    z, y = two_class_data(rng, noise=1.0)
    base = G.fit_labeled(z[::2], y[::2])
    upd = G.update_after_task(base, np.zeros((0, 2)), [], z, y)
    ref = G.fit_labeled(z, y)
    np.testing.assert_allclose(upd.means, ref.means, rtol=1e-12)
    np.testing.assert_allclose(upd.variances, ref.variances, rtol=1e-12)
    np.testing.assert_allclose(upd.weights, ref.weights, rtol=1e-12)


def test_unlabeled_point_at_mean_is_fully_assigned(rng):
    z, y = two_class_data(rng, noise=1.0)
    model = G.fit_labeled(z, y)
    resp, _ = G.responsibilities(model, model.means)
    assert resp[0, 0] > 0.99 and resp[1, 1] > 0.99


def test_update_with_shifted_class_moves_means_between():
    rng = np.random.default_rng(8)
    z_old, y_old = two_class_data(rng, n=200, noise=0.5)
    model = G.fit_labeled(z_old, y_old)
    shift = np.array([1.0, 0.0])
    z_new = np.concatenate([rng.standard_normal((200, 2)) * 0.5 + shift,
                            10 + shift + rng.standard_normal((200, 2)) * 0.5])
    y_new = np.full(400, UNLABELED)
    y_new[[0, 1, 200, 201]] = [0, 0, 1, 1]
    upd = G.update_after_task(model, z_new, y_new, z_old, y_old)
    for c in (0, 1):
        new_mean = z_new[200 * c:200 * (c + 1)].mean(axis=0)
        lo = np.minimum(model.means[c], new_mean) - 1e-9
        hi = np.maximum(model.means[c], new_mean) + 1e-9
        assert np.all((upd.means[c] >= lo) & (upd.means[c] <= hi))
        # clusters are well separated, so responsibilities are hard and the mean is the pooled average
        pooled = np.concatenate([z_old[y_old == c], z_new[200 * c:200 * (c + 1)]]).mean(axis=0)
        np.testing.assert_allclose(upd.means[c], pooled, atol=1e-6)
    assert_invariants(upd, 2, [0, 1])


def test_update_rejects_unknown_label(rng):
    z, y = two_class_data(rng, noise=1.0)
    model = G.fit_labeled(z, y)
    with pytest.raises(ValidationError):
        G.update_after_task(model, z[:3], [0, 5, -1], z, y)


def test_sample_near_degenerate_component():
    model = GmmModel(np.ones(1), np.array([[2.0, -1.0]]), np.full((1, 2), VAR_FLOOR), np.array([7]))
    z, y = G.sample(model, 100, np.random.default_rng(0))
    assert np.max(np.abs(z - [2.0, -1.0])) < 0.01
    assert np.all(y == 7)


def test_sample_label_counts_binomial():
    model = GmmModel(np.array([0.5, 0.5]), np.array([[0.0], [1.0]]), np.ones((2, 1)), np.array([0, 1]))
    _, y = G.sample(model, 10_000, np.random.default_rng(0))
    assert abs(np.sum(y == 0) - 5000) <= 150


def test_sample_deterministic_and_counts():
    model = planted()
    a = G.sample(model, 50, np.random.default_rng(9))
    b = G.sample(model, 50, np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    _, y = G.sample(model, 10, np.random.default_rng(0), counts=[4, 3, 3])
    assert np.bincount(y).tolist() == [4, 3, 3]


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = planted()
    path = tmp_path / "g.npz"
    model.save(path)
    loaded = GmmModel.load(path)
    for attr in ("weights", "means", "variances", "labels"):
        np.testing.assert_array_equal(getattr(loaded, attr), getattr(model, attr))
    assert loaded.var_floor == model.var_floor


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_fit_and_update_preserve_invariants(k, f, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(k), 6)
    z = rng.standard_normal((6 * k, f)) * 3
    model = G.fit_labeled(z, y)
    assert_invariants(model, k, np.arange(k))
    y_cur = np.full(10, UNLABELED)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        upd = G.update_after_task(model, rng.standard_normal((10, f)), y_cur, z, y)
        refined = G.em_refine(upd, z, 3)
    assert_invariants(upd, k, np.arange(k))
    assert_invariants(refined, k, np.arange(k))
