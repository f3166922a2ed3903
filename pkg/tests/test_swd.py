import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ecla import swd
from ecla.errors import DimensionError, ValidationError
from ecla.swd import ProjectionSet

from conftest import central_diff, rel_err


def brute_force_w2_squared(a, b):
    """Optimal assignment cost by enumerating every permutation (tiny n only)."""
    n = len(a)
    return min(np.mean([(a[i] - b[p[i]]) ** 2 for i in range(n)])
               for p in itertools.permutations(range(n)))


def test_wasserstein_1d_examples():
    assert swd.wasserstein_1d([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert swd.wasserstein_1d([0.0], [3.0]) == 9.0
    assert swd.wasserstein_1d([0.0, 2.0], [1.0, 3.0]) == 1.0
    assert swd.wasserstein_1d([2.0, 0.0], [3.0, 1.0]) == 1.0


def test_wasserstein_1d_unequal_sizes():
    with pytest.raises(ValidationError):
        swd.wasserstein_1d([0.0, 1.0], [0.0])


@pytest.mark.parametrize("seed", range(10))
def test_wasserstein_1d_matches_optimal_assignment(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(6), rng.standard_normal(6) + 1
    assert swd.wasserstein_1d(a, b) == pytest.approx(brute_force_w2_squared(a, b), rel=1e-12)


def test_projections_are_unit_and_seeded():
    p = swd.make_projections(64, 5, seed=3)
    np.testing.assert_allclose(np.linalg.norm(p.directions, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(p.directions, swd.make_projections(64, 5, seed=3).directions)


def test_sliced_wd_identical_is_zero(rng):
    z = rng.standard_normal((30, 4))
    assert swd.sliced_wd(z, z, swd.make_projections(20, 4, 0)) == 0.0


def test_sliced_wd_translation(rng):
    z = rng.standard_normal((40, 3))
    c = np.array([0.5, -1.0, 2.0])
    proj = swd.make_projections(25, 3, 1)
    value = swd.sliced_wd(z, z + c, proj)
    assert 0 < value <= c @ c
    # a translation keeps the sorted pairing, so each slice contributes (theta . c)^2
    assert value == pytest.approx(np.mean((proj.directions @ c) ** 2), rel=1e-10)


def test_sliced_wd_dimension_errors(rng):
    proj = swd.make_projections(5, 3, 0)
    with pytest.raises(DimensionError):
        swd.sliced_wd(np.zeros((4, 3)), np.zeros((4, 2)), proj)
    with pytest.raises(DimensionError):
        swd.sliced_wd(np.zeros((4, 3)), np.zeros((5, 3)), proj)


def test_sliced_wd_low_l_tracks_dense_reference():
    rng = np.random.default_rng(0)
    n = 2000
    za = rng.standard_normal((n, 2))
    zb = rng.standard_normal((n, 2)) + np.array([4.0, 0.0])
    reference = swd.sliced_wd(za, zb, swd.make_projections(10_000, 2, 1))
    value = swd.sliced_wd(za, zb, swd.make_projections(100, 2, 2))
    assert abs(value - reference) < 0.25 * reference


def test_grad_zero_on_identical(rng):
    z = rng.standard_normal((10, 3))
    np.testing.assert_array_equal(swd.sliced_wd_grad(z, z, swd.make_projections(7, 3, 0)), 0.0)


def test_grad_single_pair():
    proj = ProjectionSet(np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(swd.sliced_wd_grad([[1.0, 0.0]], [[0.0, 0.0]], proj), [[2.0, 0.0]])


@pytest.mark.parametrize("seed", range(20))
def test_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    za = rng.standard_normal((12, 4))
    zb = rng.standard_normal((12, 4)) * 2 + 1
    proj = swd.make_projections(9, 4, seed)
    grad = swd.sliced_wd_grad(za, zb, proj)
    num = central_diff(lambda: swd.sliced_wd(za, zb, proj), za)
    assert rel_err(grad, num) < 1e-4


def test_conditional_swd_identical_and_missing_class(rng):
    z = rng.standard_normal((20, 3))
    y = np.repeat([0, 1], 10)
    proj = swd.make_projections(10, 3, 0)
    assert swd.conditional_swd(z, y, z, y, proj) == 0.0
    with pytest.raises(ValidationError, match=r"\[1\]"):
        swd.conditional_swd(z, y, z[:10], y[:10], proj)


def test_conditional_swd_is_sum_over_classes(rng):
    proj = swd.make_projections(15, 3, 4)
    za = rng.standard_normal((20, 3))
    ya = np.repeat([0, 1], 10)
    zb = za.copy()
    zb[10:] += 1.5
    expected = swd.sliced_wd(za[10:], zb[10:], proj)
    assert swd.conditional_swd(za, ya, zb, ya, proj) == pytest.approx(expected)


def test_conditional_swd_equals_direct_sum_of_equal_size_classes(rng):
    proj = swd.make_projections(12, 4, 5)
    ya = rng.permutation(np.repeat(np.arange(3), 8))
    yb = rng.permutation(np.repeat(np.arange(3), 8))
    za = rng.standard_normal((24, 4))
    zb = rng.standard_normal((24, 4)) + 0.5
    direct = sum(swd.sliced_wd(za[ya == c], zb[yb == c], proj) for c in range(3))
    assert swd.conditional_swd(za, ya, zb, yb, proj) == pytest.approx(direct, rel=1e-12)


def test_conditional_grad_matches_finite_differences(rng):
    proj = swd.make_projections(6, 3, 2)
    za = rng.standard_normal((9, 3))
    ya = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    zb = rng.standard_normal((15, 3))
    yb = np.repeat([0, 1, 2], 5)
    _, grad = swd.conditional_swd_and_grad(za, ya, zb, yb, proj, seed=11)
    num = central_diff(lambda: swd.conditional_swd(za, ya, zb, yb, proj, seed=11), za)
    assert rel_err(grad, num) < 1e-4


def test_gradient_descent_matches_clouds():
    rng = np.random.default_rng(0)
    target = np.concatenate([rng.standard_normal((50, 2)) * 0.3 + [3, 3],
                             rng.standard_normal((50, 2)) * 0.3 - [3, 3]])
    cloud = rng.standard_normal((100, 2))
    start = swd.sliced_wd(cloud, target, swd.make_projections(200, 2, 99))
    for step in range(200):
        proj = swd.make_projections(20, 2, step)
        cloud -= 0.5 * 100 * swd.sliced_wd_grad(cloud, target, proj)
    end = swd.sliced_wd(cloud, target, swd.make_projections(200, 2, 99))
    assert end <= 0.1 * start


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 3), elements=finite), arrays(np.float64, (8, 3), elements=finite),
       st.integers(0, 2**32 - 1))
def test_sliced_wd_axioms(za, zb, seed):
    proj = swd.make_projections(10, 3, seed)
    d = swd.sliced_wd(za, zb, proj)
    assert d >= 0
    assert d == pytest.approx(swd.sliced_wd(zb, za, proj), rel=1e-12, abs=1e-12)
    perm = np.random.default_rng(seed).permutation(8)
    assert d == pytest.approx(swd.sliced_wd(za[perm], zb, proj), rel=1e-12, abs=1e-12)
    assert swd.sliced_wd(za, za[perm], proj) == 0.0
